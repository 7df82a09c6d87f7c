use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use v2gemu::attacks::{decode_payload, encode_payload};
use v2gemu::codec::{decode_exi_bytes, to_xml_pretty, CodecError};
use v2gemu::netsim::{read_jsonl, write_pcap, CaptureError};
use v2gemu::scenario::{
    parse_topology_file, resolve_seed, run, RunError, RunOptions, RunOutput, TopologyError,
    SEED_ENV,
};
use v2gemu::securechannel::{generate_identity, Identity};
use v2gemu::wire::{decode_v2gtp, frame, PayloadType};

mod exit {
    pub const OK: u8 = 0;
    pub const EXPECTATION_UNMET: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const INVALID_INPUT: u8 = 3;
    pub const IO: u8 = 4;
    pub const CODEC: u8 = 5;
    pub const TIMEOUT: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "v2gemu",
    version,
    about = "Deterministic ISO 15118 charging network emulator"
)]
struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a topology file and report every charge session.
    Run {
        topology: PathBuf,
        /// Overrides the file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON-lines capture here.
        #[arg(long)]
        capture: Option<PathBuf>,
        /// Also write the capture as pcap.
        #[arg(long)]
        pcap: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Start all vehicles at once.
        #[arg(long)]
        parallel: bool,
    },
    /// EXI payload to XML.
    Decode {
        /// Input file, or - for stdin.
        input: String,
        /// Input is hex text rather than raw bytes.
        #[arg(long)]
        hex: bool,
        /// Indent the XML output.
        #[arg(long)]
        pretty: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// XML to EXI payload.
    Encode {
        /// Input file, or - for stdin.
        input: String,
        /// Write hex text rather than raw bytes.
        #[arg(long)]
        hex: bool,
        /// Wrap the payload in a V2GTP frame.
        #[arg(long)]
        frame: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Generate a signing identity and its trust anchor.
    Keygen {
        name: String,
        /// Identity file of the issuer; self-signed when absent.
        #[arg(long)]
        issuer: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Deterministic key material.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a JSON-lines capture to pcap.
    CaptureExport {
        capture: PathBuf,
        #[arg(long)]
        pcap: PathBuf,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    line: Option<usize>,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            kind,
            message: message.to_string(),
            line: None,
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::new(exit::IO, "Io", format!("{}: {e}", path.display()))
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        let kind = match e {
            CodecError::BadMagic(_) => "BadMagic",
            CodecError::MalformedXml { .. } => "MalformedXml",
            _ => "Codec",
        };
        Failure::new(exit::CODEC, kind, e)
    }
}

impl From<TopologyError> for Failure {
    fn from(e: TopologyError) -> Self {
        let (kind, line) = match &e {
            TopologyError::Parse { line, .. } => ("ParseError", Some(*line)),
            TopologyError::UnknownPropertyKey { line, .. } => ("UnknownPropertyKey", Some(*line)),
            TopologyError::ConstraintViolation { line, .. } => ("ConstraintViolation", Some(*line)),
            TopologyError::Io { .. } => return Failure::new(exit::IO, "Io", e),
        };
        Failure {
            line,
            ..Failure::new(exit::INVALID_INPUT, kind, e)
        }
    }
}

fn read_input(input: &str) -> Result<Vec<u8>, Failure> {
    if input == "-" {
        let mut buf = Vec::new();
        io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| Failure::io(Path::new("<stdin>"), e))?;
        Ok(buf)
    } else {
        fs::read(input).map_err(|e| Failure::io(Path::new(input), e))
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::io(p, e)),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::io(Path::new("<stdout>"), e)),
    }
}

fn cmd_run(
    topology: &Path,
    seed: Option<u64>,
    capture: Option<&Path>,
    pcap: Option<&Path>,
    report: Option<&Path>,
    parallel: bool,
) -> Result<u8, Failure> {
    let spec = parse_topology_file(topology)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(seed, spec.seed, env.as_deref())
        .map_err(|e| Failure::new(exit::INVALID_INPUT, "BadSeed", e))?;
    let options = RunOptions {
        seed: Some(seed),
        parallel,
    };
    let (mut out, timed_out) = match run(&spec, &options) {
        Ok(out) => (out, false),
        Err(RunError::SimulationTimeout(out)) => (*out, true),
        Err(RunError::Topology(e)) => return Err(e.into()),
        Err(e) => return Err(Failure::new(exit::INVALID_INPUT, "RunSetup", e)),
    };
    emit_artifacts(&mut out, capture, pcap, report)?;
    for e in &out.report.expectations {
        let actual = e.actual.map_or("unfinished".to_string(), |o| o.to_string());
        let mark = if e.met { "ok" } else { "UNEXPECTED" };
        eprintln!("{}: {actual} (expected {}) {mark}", e.ev, e.expected);
    }
    if timed_out {
        return Err(Failure::new(
            exit::TIMEOUT,
            "SimulationTimeout",
            "duration limit reached with sessions unfinished",
        ));
    }
    Ok(if out.report.expectations_met {
        exit::OK
    } else {
        exit::EXPECTATION_UNMET
    })
}

fn emit_artifacts(
    out: &mut RunOutput,
    capture: Option<&Path>,
    pcap: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(p) = capture {
        out.write_capture(p).map_err(|e| Failure::io(p, e))?;
    }
    if let Some(p) = pcap {
        let file = fs::File::create(p).map_err(|e| Failure::io(p, e))?;
        write_pcap(io::BufWriter::new(file), &out.capture).map_err(|e| Failure::io(p, e))?;
    }
    match report {
        Some(p) => out.write_report(p).map_err(|e| Failure::io(p, e)),
        None => write_output(None, out.report.to_json().as_bytes()),
    }
}

/// Accepts a bare EXI payload or one wrapped in a V2GTP frame.
fn exi_payload(bytes: Vec<u8>) -> Vec<u8> {
    match decode_v2gtp(&bytes) {
        Ok(f)
            if f.header.payload_type == PayloadType::ExiV2gMessage && f.consumed == bytes.len() =>
        {
            f.payload
        }
        _ => bytes,
    }
}

fn cmd_decode(
    input: &str,
    hex_input: bool,
    pretty: bool,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let mut bytes = read_input(input)?;
    if hex_input {
        let text = String::from_utf8_lossy(&bytes);
        let compact: String = text.split_whitespace().collect();
        bytes = hex::decode(compact).map_err(|e| Failure::new(exit::INVALID_INPUT, "BadHex", e))?;
    }
    let bytes = exi_payload(bytes);
    let mut xml = if pretty {
        to_xml_pretty(&decode_exi_bytes(&bytes)?)
    } else {
        decode_payload(&bytes)?
    };
    if !xml.ends_with('\n') {
        xml.push('\n');
    }
    write_output(out, xml.as_bytes())?;
    Ok(exit::OK)
}

fn cmd_encode(
    input: &str,
    hex_output: bool,
    wrap: bool,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let bytes = read_input(input)?;
    let text =
        String::from_utf8(bytes).map_err(|e| Failure::new(exit::INVALID_INPUT, "BadUtf8", e))?;
    let mut exi = encode_payload(&text)?;
    if wrap {
        exi = frame(PayloadType::ExiV2gMessage, &exi);
    }
    if hex_output {
        let mut h = hex::encode(exi);
        h.push('\n');
        write_output(out, h.as_bytes())?;
    } else {
        write_output(out, &exi)?;
    }
    Ok(exit::OK)
}

fn cmd_keygen(
    name: &str,
    issuer: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<u8, Failure> {
    let issuer: Option<Identity> = match issuer {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| {
                Failure::new(
                    exit::INVALID_INPUT,
                    "BadIdentity",
                    format!("{}: {e}", p.display()),
                )
            })?)
        }
        None => None,
    };
    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let identity = generate_identity(name, issuer.as_ref(), &mut rng);
    let id_path = out_dir.join(format!("{name}.identity.json"));
    let anchor_path = out_dir.join(format!("{name}.anchor.json"));
    let json = |v: serde_json::Result<String>| v.expect("identity serializes") + "\n";
    fs::write(&id_path, json(serde_json::to_string_pretty(&identity)))
        .map_err(|e| Failure::io(&id_path, e))?;
    fs::write(
        &anchor_path,
        json(serde_json::to_string_pretty(&identity.anchor())),
    )
    .map_err(|e| Failure::io(&anchor_path, e))?;
    eprintln!("wrote {} and {}", id_path.display(), anchor_path.display());
    Ok(exit::OK)
}

fn cmd_capture_export(capture: &Path, pcap: &Path) -> Result<u8, Failure> {
    let file = fs::File::open(capture).map_err(|e| Failure::io(capture, e))?;
    let records = read_jsonl(BufReader::new(file)).map_err(|e| match e {
        CaptureError::Io(e) => Failure::io(capture, e),
        other => Failure::new(
            exit::INVALID_INPUT,
            "BadCapture",
            format!("{}: {other}", capture.display()),
        ),
    })?;
    let out = fs::File::create(pcap).map_err(|e| Failure::io(pcap, e))?;
    write_pcap(io::BufWriter::new(out), &records).map_err(|e| Failure::io(pcap, e))?;
    eprintln!("exported {} records", records.len());
    Ok(exit::OK)
}

fn report_failure(f: &Failure, json: bool) {
    if json {
        let mut v = serde_json::json!({
            "error": f.kind,
            "message": f.message,
            "exitCode": f.code,
        });
        if let Some(line) = f.line {
            v["line"] = line.into();
        }
        eprintln!("{v}");
    } else {
        eprintln!("error: {}", f.message);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let json = std::env::args().any(|a| a == "--json-errors");
            if code == exit::USAGE && json {
                report_failure(
                    &Failure::new(exit::USAGE, "Usage", e.to_string().trim_end()),
                    true,
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run {
            topology,
            seed,
            capture,
            pcap,
            report,
            parallel,
        } => cmd_run(
            topology,
            *seed,
            capture.as_deref(),
            pcap.as_deref(),
            report.as_deref(),
            *parallel,
        ),
        Command::Decode {
            input,
            hex,
            pretty,
            out,
        } => cmd_decode(input, *hex, *pretty, out.as_deref()),
        Command::Encode {
            input,
            hex,
            frame,
            out,
        } => cmd_encode(input, *hex, *frame, out.as_deref()),
        Command::Keygen {
            name,
            issuer,
            out_dir,
            seed,
        } => cmd_keygen(name, issuer.as_deref(), out_dir, *seed),
        Command::CaptureExport { capture, pcap } => cmd_capture_export(capture, pcap),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            report_failure(&f, cli.json_errors);
            ExitCode::from(f.code)
        }
    }
}
