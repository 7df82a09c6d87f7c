use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use std::io::Write;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_v2gemu"));
    c.env_remove("V2GEMU_SEED");
    c
}

fn topology(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../topologies")
        .join(format!("{name}.toplgy"))
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn run_basic_prints_a_completed_report() {
    let o = bin().arg("run").arg(topology("basic")).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o.stdout);
    assert_eq!(r["perEv"]["ev1"]["outcome"], "Completed");
    assert_eq!(r["seed"], 42);
}

#[test]
fn run_attack_meets_expectation() {
    for name in ["dos", "tls-countermeasure"] {
        let o = bin().arg("run").arg(topology(name)).output().unwrap();
        assert_eq!(
            code(&o),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(json(&o.stdout)["expectationsMet"], true);
    }
}

#[test]
fn unmet_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(topology("basic")).unwrap();
    let path = dir.path().join("t.toplgy");
    std::fs::write(
        &path,
        text.replace("seed = 42", "seed = 42\nexpect = FailedHandshake"),
    )
    .unwrap();
    let o = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("UNEXPECTED"));
}

#[test]
fn artifacts_are_written_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut captures = Vec::new();
    for i in 0..2 {
        let cap = dir.path().join(format!("c{i}.jsonl"));
        let rep = dir.path().join(format!("r{i}.json"));
        let pcap = dir.path().join(format!("p{i}.pcap"));
        let o = bin()
            .args(["run", "--capture"])
            .arg(&cap)
            .arg("--report")
            .arg(&rep)
            .arg("--pcap")
            .arg(&pcap)
            .arg(topology("sdp-rewrite"))
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        assert!(o.stdout.is_empty());
        let r = json(&std::fs::read(&rep).unwrap());
        assert_eq!(r["capturePath"], cap.display().to_string());
        assert!(std::fs::metadata(&pcap).unwrap().len() > 24);
        captures.push(std::fs::read(&cap).unwrap());

        let exported = dir.path().join(format!("e{i}.pcap"));
        let o = bin()
            .arg("capture-export")
            .arg(&cap)
            .arg("--pcap")
            .arg(&exported)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        assert_eq!(
            std::fs::read(&exported).unwrap(),
            std::fs::read(&pcap).unwrap()
        );
    }
    assert_eq!(captures[0], captures[1]);
}

#[test]
fn seed_flag_and_environment() {
    let seed_of = |args: &[&str], env: Option<&str>| {
        let mut c = bin();
        c.arg("run").args(args).arg(topology("basic"));
        if let Some(v) = env {
            c.env("V2GEMU_SEED", v);
        }
        let o = c.output().unwrap();
        (
            code(&o),
            if o.stdout.is_empty() {
                serde_json::Value::Null
            } else {
                json(&o.stdout)["seed"].clone()
            },
        )
    };
    assert_eq!(seed_of(&["--seed", "9"], Some("5")), (0, 9.into()));
    // The file's seed beats the environment.
    assert_eq!(seed_of(&[], Some("5")), (0, 42.into()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toplgy");
    std::fs::write(
        &path,
        std::fs::read_to_string(topology("basic"))
            .unwrap()
            .replace("seed = 42", ""),
    )
    .unwrap();
    let o = bin()
        .arg("run")
        .arg(&path)
        .env("V2GEMU_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(json(&o.stdout)["seed"], 5);
    let o = bin()
        .arg("run")
        .arg(&path)
        .env("V2GEMU_SEED", "five")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn bad_topology_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toplgy");
    std::fs::write(
        &path,
        "[switch sw]\n[se s]\nlinks = sw\nfree.service = maybe\n",
    )
    .unwrap();
    let o = bin()
        .arg("--json-errors")
        .arg("run")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    let e = json(&o.stderr);
    assert_eq!(e["error"], "ConstraintViolation");
    assert_eq!(e["line"], 4);
    assert_eq!(e["exitCode"], 3);

    let o = bin()
        .arg("run")
        .arg(dir.path().join("missing.toplgy"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn timeout_exits_six_with_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toplgy");
    std::fs::write(&path, "duration = 1s\n[switch sw]\n[ev e]\nlinks = sw\n").unwrap();
    let o = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(code(&o), 6);
    assert_eq!(json(&o.stdout)["timedOut"], true);
}

fn pipe(args: &[&str], input: &[u8]) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn encode_decode_round_trip() {
    let xml = "<a x=\"1\"><b>hi</b><c/></a>";
    let o = pipe(&["encode", "-"], xml.as_bytes());
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout[0], 0xEC);
    let exi = o.stdout.clone();

    let o = pipe(&["decode", "-"], &exi);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim_end(), xml);

    let framed = pipe(&["encode", "--frame", "--hex", "-"], xml.as_bytes());
    let text = String::from_utf8(framed.stdout).unwrap();
    assert!(text.starts_with("01fe8001"));
    let o = pipe(&["decode", "--hex", "--pretty", "-"], text.as_bytes());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("\n  <b>hi</b>"));
}

#[test]
fn decode_rejects_non_exi() {
    let o = pipe(&["--json-errors", "decode", "-"], b"hello world");
    assert_eq!(code(&o), 5);
    let e = json(&o.stderr);
    assert_eq!(e["error"], "BadMagic");
    let o = pipe(&["decode", "-"], b"hello world");
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
    let o = pipe(&["encode", "-"], b"<a><b></a>");
    assert_eq!(code(&o), 5);
}

#[test]
fn keygen_chain_drives_a_secured_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = bin()
        .args(["keygen", "root", "--seed", "1", "--out-dir"])
        .arg(d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .args(["keygen", "se1", "--seed", "2", "--issuer"])
        .arg(d.join("root.identity.json"))
        .arg("--out-dir")
        .arg(d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let path = d.join("t.toplgy");
    std::fs::write(
        &path,
        "[switch sw]\n[se se1]\nlinks = sw\ntls = true\ntls.identity = se1.identity.json\n\
         [ev ev1]\nlinks = sw\ntls = true\ntls.anchor = root.anchor.json\n",
    )
    .unwrap();
    let o = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o.stdout)["perEv"]["ev1"]["secured"], true);
}

#[test]
fn usage_errors_exit_two() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().args(["--json-errors", "run"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(json(&o.stderr)["error"], "Usage");
}
