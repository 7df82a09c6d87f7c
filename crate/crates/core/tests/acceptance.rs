//! Acceptance gate: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use v2gemu::attacks::{mitm_attach, mitm_install, MitmOptions, SessionIdForger};
use v2gemu::codec::{decode_exi_bytes, encode_exi, parse_xml_text, to_xml_text, DocNode};
use v2gemu::controllers::{
    negotiate_protocol, secc_start, ChargeSessionReport, EvConfig, EvccApp, Flow, Outcome, SeConfig,
};
use v2gemu::messages::{
    decode_message, from_doc, to_doc, AppProtocol, Body, MessageKind, ResponseCode, SessionId,
    V2GMessage, STAGE_CHARGE_PARAMETER_DISCOVERY, STAGE_SESSION_SETUP, STAGE_SESSION_STOP,
};
use v2gemu::netsim::{
    build_network, reassemble_streams, CaptureRecord, Direction, FrameKind, NetAddress, SockAddr,
    SECONDS,
};
use v2gemu::scenario::{parse_topology_file, run, RunOptions, RunOutput, TopologySpec};
use v2gemu::securechannel::HandshakeFailure;
use v2gemu::wire::{
    decode_sdp_request, decode_sdp_response, decode_v2gtp, encode_sdp_request, encode_sdp_response,
    encode_v2gtp, next_frame, PayloadType, Reassembly,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const GOLDEN: &[&str] = &[
    "basic",
    "dos",
    "sdp-rewrite",
    "tls-countermeasure",
    "tls-dos",
    "tls-basic",
    "dc-charge",
    "mode-mismatch",
    "two-columns",
    "spoof-dos",
];

fn golden(name: &str) -> TopologySpec {
    parse_topology_file(&root().join("topologies").join(format!("{name}.toplgy")))
        .expect("golden topology parses")
}

fn run_golden(name: &str, seed: Option<u64>) -> RunOutput {
    run(
        &golden(name),
        &RunOptions {
            seed,
            parallel: false,
        },
    )
    .expect("golden topology runs")
}

fn ev_report<'a>(out: &'a RunOutput, ev: &str) -> Result<&'a ChargeSessionReport, String> {
    out.report
        .per_ev
        .get(ev)
        .ok_or_else(|| format!("no report for {ev}"))
}

/// Frames of the streams `node` captured in `direction`, decoded where possible.
fn stream_messages(
    capture: &[CaptureRecord],
    node: &str,
    direction: Direction,
) -> Vec<(SockAddr, SockAddr, V2GMessage)> {
    let mut out = Vec::new();
    for ((src, dst), mut bytes) in reassemble_streams(capture, node, direction) {
        while let Reassembly::Frame(f) = next_frame(&bytes) {
            bytes.drain(..f.consumed);
            if f.header.payload_type == PayloadType::ExiV2gMessage {
                if let Ok(m) = decode_message(&f.payload) {
                    out.push((src, dst, m));
                }
            }
        }
    }
    out
}

fn c1_happy_path() -> Check {
    let started = Instant::now();
    let out = run_golden("basic", None);
    let wall = started.elapsed();
    let r = ev_report(&out, "ev1")?;
    ensure(r.outcome == Outcome::Completed, || {
        format!("outcome {:?}", r.outcome)
    })?;
    let loops = golden("basic")
        .ev_config(golden("basic").node("ev1").unwrap())
        .unwrap()
        .charging_loop_iterations as usize;

    use MessageKind::*;
    let mut expected = vec![
        SupportedAppProtocolReq,
        SessionSetupReq,
        ServiceDiscoveryReq,
        PaymentServiceSelectionReq,
        AuthorizationReq,
        ChargeParameterDiscoveryReq,
        PowerDeliveryReq,
    ];
    expected.extend(std::iter::repeat_n(ChargingStatusReq, loops));
    expected.extend([PowerDeliveryReq, SessionStopReq]);

    let t = &r.transcript;
    ensure(t.len() == 2 * expected.len(), || {
        format!(
            "transcript has {} entries, want {}",
            t.len(),
            2 * expected.len()
        )
    })?;
    for (i, want) in expected.iter().enumerate() {
        let (req, res) = (&t[2 * i], &t[2 * i + 1]);
        ensure(req.flow == Flow::Sent && req.kind == *want, || {
            format!(
                "entry {} is {:?} {:?}, want sent {want:?}",
                2 * i,
                req.flow,
                req.kind
            )
        })?;
        ensure(
            res.flow == Flow::Received && res.kind == want.counterpart(),
            || {
                format!(
                    "entry {} is {:?} {:?}, want received {:?}",
                    2 * i + 1,
                    res.flow,
                    res.kind,
                    want.counterpart()
                )
            },
        )?;
        ensure(res.at >= req.at, || "response precedes request".into())?;
    }
    let simulated = r.finished_at - r.started_at;
    ensure(simulated < SECONDS, || {
        format!("simulated duration {simulated} us")
    })?;
    ensure(wall < Duration::from_secs(1), || {
        format!("wall clock {wall:?}")
    })?;
    Ok(format!(
        "{} pairs ({} loop passes), {:.1} ms simulated, {:.1} ms wall",
        expected.len(),
        loops,
        simulated as f64 / 1000.0,
        wall.as_secs_f64() * 1000.0
    ))
}

fn sap_versions(msgs: &[(SockAddr, SockAddr, V2GMessage)]) -> Vec<(SockAddr, Vec<(u32, u32)>)> {
    msgs.iter()
        .filter_map(|(src, _, m)| match &m.body {
            Body::SupportedAppProtocolReq { protocols } => Some((
                *src,
                protocols
                    .iter()
                    .map(|p| (p.version_major, p.version_minor))
                    .collect(),
            )),
            _ => None,
        })
        .collect()
}

fn c2_dos() -> Check {
    let out = run_golden("dos", None);
    let r = ev_report(&out, "ev1")?;
    ensure(r.outcome == Outcome::FailedNegotiation, || {
        format!("outcome {:?}", r.outcome)
    })?;
    ensure(r.last_stage_reached == Some(0), || {
        format!("last stage {:?}", r.last_stage_reached)
    })?;
    ensure(
        r.response_code == Some(ResponseCode::FailedNoNegotiation),
        || format!("code {:?}", r.response_code),
    )?;

    let original: Vec<(u32, u32)> = EvConfig::default()
        .protocols
        .iter()
        .map(|p| (p.version_major, p.version_minor))
        .collect();
    let mitm_net = NetAddress::derived("attacker");
    let at_secc = sap_versions(&stream_messages(&out.capture, "se1", Direction::In));
    ensure(at_secc.len() == 1, || {
        format!("{} SAP requests reached the SECC", at_secc.len())
    })?;
    ensure(at_secc[0].0.net == mitm_net, || {
        format!("SAP request at SECC came from {}", at_secc[0].0)
    })?;
    ensure(at_secc[0].1.iter().all(|v| *v == (0, 0)), || {
        format!("SECC saw versions {:?}", at_secc[0].1)
    })?;
    let from_ev = sap_versions(&stream_messages(&out.capture, "ev1", Direction::Out));
    ensure(from_ev.len() == 1 && from_ev[0].1 == original, || {
        format!("EV sent {from_ev:?}, configured {original:?}")
    })?;
    let secc_out = stream_messages(&out.capture, "se1", Direction::Out);
    ensure(
        secc_out.iter().any(|(_, _, m)| {
            matches!(
                m.body,
                Body::SupportedAppProtocolRes {
                    response_code: ResponseCode::FailedNoNegotiation,
                    ..
                }
            )
        }),
        || "SECC did not answer FailedNoNegotiation".into(),
    )?;
    ensure(
        secc_out
            .iter()
            .chain(stream_messages(&out.capture, "ev1", Direction::Out).iter())
            .all(|(_, _, m)| m.kind().base_stage() == Some(0)),
        || "a message past stage 0 was exchanged".into(),
    )?;
    Ok(format!(
        "EV offered {original:?}, SECC received [(0, 0)] from the MitM"
    ))
}

fn c3_sdp_rewrite() -> Check {
    let out = run_golden("sdp-rewrite", None);
    let r = ev_report(&out, "ev1")?;
    ensure(r.outcome == Outcome::Completed, || {
        format!("outcome {:?}", r.outcome)
    })?;
    let proxy = match out.report.scenario {
        Some(v2gemu::attacks::AttackScenario::SdpPortRewrite { new_port, .. }) => new_port,
        ref other => return Err(format!("scenario {other:?}")),
    };
    let peer = r.peer.ok_or("no peer recorded")?;
    ensure(peer.port == proxy, || {
        format!("EV peer port {} != proxy port {proxy}", peer.port)
    })?;

    let mitm_in: BTreeSet<String> = out
        .capture
        .iter()
        .filter(|c| c.node == "attacker" && c.direction == Direction::In)
        .map(|c| serde_json::to_string(&c.frame).unwrap())
        .collect();
    let mut total = 0;
    let mut missing = 0;
    for c in out.capture.iter().filter(|c| {
        (c.node == "ev1" || c.node == "se1")
            && c.direction == Direction::Out
            && c.frame.kind == FrameKind::StreamSegment
    }) {
        total += 1;
        if !mitm_in.contains(&serde_json::to_string(&c.frame).unwrap()) {
            missing += 1;
        }
    }
    ensure(total > 0 && missing == 0, || {
        format!("{missing} of {total} stream frames bypassed the MitM")
    })?;
    Ok(format!(
        "{total}/{total} stream frames traversed the MitM, EV peer port {}",
        peer.port
    ))
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Stream payload bytes that mention the session id in any of its forms.
fn leaks(capture: &[CaptureRecord], id: SessionId) -> usize {
    let raw = id.as_u64().to_be_bytes();
    let upper = format!("{:016X}", id.as_u64());
    let lower = upper.to_lowercase();
    capture
        .iter()
        .filter(|c| c.frame.kind == FrameKind::StreamSegment)
        .filter(|c| {
            let p = &c.frame.payload;
            contains(p, &raw) || contains(p, upper.as_bytes()) || contains(p, lower.as_bytes())
        })
        .count()
}

fn c4_tls() -> Check {
    let mut notes = Vec::new();
    for name in ["tls-countermeasure", "tls-dos"] {
        let out = run_golden(name, None);
        let r = ev_report(&out, "ev1")?;
        ensure(r.outcome == Outcome::FailedHandshake, || {
            format!("{name}: outcome {:?}", r.outcome)
        })?;
        ensure(
            matches!(
                r.handshake_failure,
                Some(
                    HandshakeFailure::CertificateVerifyFailure
                        | HandshakeFailure::TranscriptMismatch
                )
            ),
            || format!("{name}: reason {:?}", r.handshake_failure),
        )?;
        notes.push(format!("{name}: {:?}", r.handshake_failure.unwrap()));
    }
    let out = run_golden("tls-basic", None);
    let r = ev_report(&out, "ev1")?;
    ensure(r.outcome == Outcome::Completed && r.secured, || {
        format!("tls-basic: {:?} secured={}", r.outcome, r.secured)
    })?;
    let id = r.session_id;
    ensure(!id.is_zero(), || "no session id".into())?;
    let n = leaks(&out.capture, id);
    ensure(n == 0, || {
        format!("session id visible in {n} secured payloads")
    })?;
    // The same search does find the id on a plain run.
    let plain = run_golden("basic", None);
    let plain_id = ev_report(&plain, "ev1")?.session_id;
    let seen = leaks(&plain.capture, plain_id);
    ensure(seen > 0, || {
        "leak search finds nothing even in plain traffic".into()
    })?;
    notes.push(format!(
        "no MitM: Completed, id in 0 payloads (plain control: {seen})"
    ));
    Ok(notes.join("; "))
}

fn random_text(rng: &mut ChaCha20Rng, max: usize) -> String {
    const PALETTE: &[char] = &[
        'a', 'Z', '0', ' ', '<', '>', '&', '"', '\'', '\t', '\n', 'é', '€', '中', '😀', '=', '/',
        ';',
    ];
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| PALETTE[rng.gen_range(0..PALETTE.len())])
        .collect()
}

fn random_name(rng: &mut ChaCha20Rng) -> String {
    const FIRST: &[u8] = b"ABCXYZabcxyz_";
    const REST: &[u8] = b"ABCabc019_.-";
    let mut s = String::new();
    s.push(FIRST[rng.gen_range(0..FIRST.len())] as char);
    for _ in 0..rng.gen_range(0..6) {
        s.push(REST[rng.gen_range(0..REST.len())] as char);
    }
    s
}

fn random_tree(rng: &mut ChaCha20Rng, depth: u32) -> DocNode {
    let mut node = DocNode::new(random_name(rng));
    let mut seen = BTreeSet::new();
    for _ in 0..rng.gen_range(0..3) {
        let k = random_name(rng);
        if seen.insert(k.clone()) {
            node.attributes.push((k, random_text(rng, 6)));
        }
    }
    if depth > 0 && rng.gen_bool(0.6) {
        node.children = (0..rng.gen_range(1..4))
            .map(|_| random_tree(rng, depth - 1))
            .collect();
    } else if rng.gen_bool(0.7) {
        node.text = Some(random_text(rng, 12));
    }
    node
}

fn c5_codec() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0DEC);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let tree = random_tree(&mut rng, 4);
        if decode_exi_bytes(&encode_exi(&tree).bytes).as_ref() != Ok(&tree) {
            mismatches += 1;
        }
        if parse_xml_text(&to_xml_text(&tree)).as_ref() != Ok(&tree) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || {
        format!("{mismatches} round-trip mismatches")
    })?;

    let mut corpus: Vec<V2GMessage> = Vec::new();
    let mut dir: Vec<_> = std::fs::read_dir(root().join("docs/messages"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    dir.sort();
    for path in dir {
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let doc = parse_xml_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        corpus.push(from_doc(&doc).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    for name in [
        "basic",
        "dc-charge",
        "two-columns",
        "sdp-rewrite",
        "mode-mismatch",
    ] {
        for seed in 0..10 {
            let out = run_golden(name, Some(seed));
            for node in golden(name).nodes.iter().filter(|n| n.kind.is_host()) {
                corpus.extend(
                    stream_messages(&out.capture, &node.name, Direction::Out)
                        .into_iter()
                        .map(|(_, _, m)| m),
                );
            }
        }
    }
    let kinds: BTreeSet<MessageKind> = corpus.iter().map(V2GMessage::kind).collect();
    let mut worst: f64 = 0.0;
    for m in &corpus {
        let doc = to_doc(m);
        let exi = encode_exi(&doc).bytes.len();
        let xml = to_xml_text(&doc).len();
        ensure(exi < xml, || {
            format!("{:?}: EXI {exi} bytes >= XML {xml} bytes", m.kind())
        })?;
        worst = worst.max(exi as f64 / xml as f64);
    }
    ensure(kinds.len() == MessageKind::ALL.len(), || {
        format!(
            "corpus covers {} of {} kinds",
            kinds.len(),
            MessageKind::ALL.len()
        )
    })?;
    Ok(format!(
        "20000 round trips, 0 mismatches; {} messages over {} kinds all smaller as EXI (worst ratio {worst:.2})",
        corpus.len(),
        kinds.len()
    ))
}

fn c6_wire_fuzz() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xF022);
    let mut crashes = 0;
    let mut bad = 0;
    let mut valid = 0;
    for i in 0..100_000u32 {
        let len = rng.gen_range(0..=64);
        let mut input: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        // Bias part of the corpus toward plausible headers so the valid paths
        // are exercised too.
        if i % 4 == 0 && input.len() >= 8 {
            input[0] = 0x01;
            input[1] = 0xFE;
            let ty: [u16; 4] = [0x8001, 0x9000, 0x9001, rng.gen()];
            input[2..4].copy_from_slice(&ty[rng.gen_range(0..4)].to_be_bytes());
            let declared = rng.gen_range(0..=(input.len() as u32 - 8 + 2));
            input[4..8].copy_from_slice(&declared.to_be_bytes());
        }
        let result = catch_unwind(AssertUnwindSafe(|| {
            let mut ok = true;
            let mut n = 0;
            if let Ok(f) = decode_v2gtp(&input) {
                n += 1;
                ok &= encode_v2gtp(&f.header, &f.payload)
                    .map(|b| b == input[..f.consumed])
                    .unwrap_or(false);
            }
            if let Ok(r) = decode_sdp_request(&input) {
                n += 1;
                ok &= encode_sdp_request(&r) == input;
            }
            if let Ok(r) = decode_sdp_response(&input) {
                n += 1;
                ok &= encode_sdp_response(&r) == input;
            }
            (ok, n)
        }));
        match result {
            Err(_) => crashes += 1,
            Ok((false, _)) => bad += 1,
            Ok((true, n)) => valid += n,
        }
    }
    ensure(crashes == 0 && bad == 0, || {
        format!("{crashes} crashes, {bad} non-reproducing decodes")
    })?;
    Ok(format!(
        "100000 inputs, 0 crashes, {valid} valid decodes all re-encode exactly"
    ))
}

fn c7_determinism() -> Check {
    let mut with_ids = 0;
    for name in GOLDEN {
        let a = run_golden(name, None);
        let b = run_golden(name, None);
        ensure(a.capture_jsonl() == b.capture_jsonl(), || {
            format!("{name}: captures differ")
        })?;
        ensure(a.report.to_json() == b.report.to_json(), || {
            format!("{name}: reports differ")
        })?;
        let c = run_golden(name, Some(a.report.seed ^ 0x5EED));
        for (ev, ra) in &a.report.per_ev {
            let rc = ev_report(&c, ev)?;
            ensure(ra.outcome == rc.outcome, || {
                format!("{name}/{ev}: outcome changed with the seed")
            })?;
            if !ra.session_id.is_zero() {
                ensure(ra.session_id != rc.session_id, || {
                    format!("{name}/{ev}: session id ignores the seed")
                })?;
                with_ids += 1;
            }
        }
    }
    Ok(format!("{} topologies byte-identical on rerun; {with_ids} session ids moved with the seed, outcomes fixed", GOLDEN.len()))
}

fn oracle(offers: &[AppProtocol], supported: &[AppProtocol]) -> Option<u8> {
    let mut best: Option<&AppProtocol> = None;
    for o in offers {
        let matches = supported.iter().any(|s| {
            s.namespace == o.namespace
                && s.version_major == o.version_major
                && o.version_minor >= s.version_minor
        });
        if matches && best.is_none_or(|b| o.priority < b.priority) {
            best = Some(o);
        }
    }
    best.map(|b| b.schema_id)
}

fn c8_negotiation() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0x0AC1E);
    const NS: &[&str] = &[
        "urn:iso:15118:2:2013:MsgDef",
        "urn:iso:15118:2:2010:MsgDef",
        "urn:din:70121:2012:MsgDef",
    ];
    let proto = |rng: &mut ChaCha20Rng, priority: u8, schema: u8| AppProtocol {
        namespace: NS[rng.gen_range(0..NS.len())].to_string(),
        version_major: rng.gen_range(0..3),
        version_minor: rng.gen_range(0..3),
        schema_id: schema,
        priority,
    };
    let mut disagreements = 0;
    let mut matched = 0;
    for _ in 0..1_000 {
        let mut priorities: Vec<u8> = (1..=20).collect();
        for i in (1..priorities.len()).rev() {
            priorities.swap(i, rng.gen_range(0..=i));
        }
        let offers: Vec<AppProtocol> = (0..rng.gen_range(1..=6))
            .map(|i| {
                let schema = rng.gen();
                proto(&mut rng, priorities[i], schema)
            })
            .collect();
        let supported: Vec<AppProtocol> = (0..rng.gen_range(1..=4))
            .map(|i| proto(&mut rng, i + 1, i))
            .collect();
        let got = negotiate_protocol(&offers, &supported).ok();
        if got != oracle(&offers, &supported) {
            disagreements += 1;
        }
        matched += usize::from(got.is_some());
    }
    ensure(disagreements == 0, || {
        format!("{disagreements} disagreements")
    })?;
    Ok(format!(
        "1000 cases ({matched} negotiated, {} refused), 0 disagreements",
        1000 - matched
    ))
}

fn c9_session_ids() -> Check {
    let mut checked = 0;
    for name in GOLDEN {
        let out = run_golden(name, None);
        for (ev, r) in &out.report.per_ev {
            let id = r.session_id;
            if id.is_zero() {
                continue;
            }
            for e in &r.transcript {
                let stage = e.kind.base_stage().unwrap_or(0);
                if stage >= STAGE_SESSION_SETUP && e.kind != MessageKind::SessionSetupReq {
                    ensure(e.session_id == id, || {
                        format!("{name}/{ev}: {:?} carries {}", e.kind, e.session_id)
                    })?;
                    checked += 1;
                }
            }
        }
        // Wire view, including anything a MitM rewrote.
        let spec = golden(name);
        for se in spec
            .nodes
            .iter()
            .filter(|n| n.kind == v2gemu::scenario::NodeKind::Se)
        {
            for served in &out.report.per_se[&se.name] {
                let Some(id) = served.session_id else {
                    continue;
                };
                for dir in [Direction::In, Direction::Out] {
                    for (src, dst, m) in stream_messages(&out.capture, &se.name, dir) {
                        if src != served.peer && dst != served.peer {
                            continue;
                        }
                        let stage = m.kind().base_stage().unwrap_or(0);
                        if stage >= STAGE_SESSION_SETUP && m.kind() != MessageKind::SessionSetupReq
                        {
                            ensure(m.session_id == id, || {
                                format!(
                                    "{name}/{}: {:?} carries {} on the wire",
                                    se.name,
                                    m.kind(),
                                    m.session_id
                                )
                            })?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }

    // A wrong-id AuthorizationReq injected by a custom interceptor.
    let spec = golden("sdp-rewrite");
    let mut sim = build_network(&spec.network_spec(), 3).map_err(|e| e.to_string())?;
    let se = sim.node_id("se1").unwrap();
    let ev = sim.node_id("ev1").unwrap();
    let mitm = sim.node_id("attacker").unwrap();
    secc_start(&mut sim, se, SeConfig::default(), None, 4).map_err(|e| e.to_string())?;
    let forger = SessionIdForger {
        kind: MessageKind::AuthorizationReq,
        session_id: SessionId::from_u64(0xBAD0_BAD0_BAD0_BAD0),
    };
    mitm_install(&mut sim, mitm, Box::new(forger), MitmOptions::default())
        .map_err(|e| e.to_string())?;
    mitm_attach(&mut sim, "sw1", mitm, &[ev, se]).map_err(|e| e.to_string())?;
    let app = sim
        .add_app(ev, Box::new(EvccApp::new(EvConfig::default(), None, 5)))
        .map_err(|e| e.to_string())?;
    sim.run_until(60 * SECONDS, |s| {
        s.app::<EvccApp>(ev, app).unwrap().is_finished()
    });
    let r = sim.app::<EvccApp>(ev, app).unwrap().report();
    ensure(
        r.outcome == Outcome::FailedRejected
            && r.response_code == Some(ResponseCode::FailedUnknownSession),
        || format!("forged id gave {:?} / {:?}", r.outcome, r.response_code),
    )?;
    Ok(format!("{checked} post-setup messages carry the assigned id; forged AuthorizationReq -> FailedUnknownSession"))
}

fn c10_mode_mismatch() -> Check {
    let spec = golden("mode-mismatch");
    let ev_cfg = spec.ev_config(spec.node("ev1").unwrap()).unwrap();
    let se_cfg = spec.se_config(spec.node("se1").unwrap()).unwrap();
    ensure(
        !se_cfg
            .energy_transfer_modes_supported
            .contains(&ev_cfg.energy_transfer_mode_requested),
        || "topology does not set up a mismatch".into(),
    )?;
    let out = run_golden("mode-mismatch", None);
    let r = ev_report(&out, "ev1")?;
    ensure(
        r.response_code == Some(ResponseCode::FailedWrongEnergyTransferMode),
        || format!("code {:?}", r.response_code),
    )?;
    ensure(
        r.last_stage_reached == Some(STAGE_CHARGE_PARAMETER_DISCOVERY),
        || format!("stage {:?}", r.last_stage_reached),
    )?;
    ensure(
        r.last_stage_reached != Some(STAGE_SESSION_STOP) && r.outcome != Outcome::Completed,
        || "session completed".into(),
    )?;
    Ok(format!(
        "{} vs {:?}: FailedWrongEnergyTransferMode at stage {}",
        ev_cfg.energy_transfer_mode_requested,
        se_cfg
            .energy_transfer_modes_supported
            .iter()
            .map(|m| m.as_str())
            .collect::<Vec<_>>(),
        STAGE_CHARGE_PARAMETER_DISCOVERY
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("happy-path charge", c1_happy_path),
        ("DoS version rewrite", c2_dos),
        ("SDP port-rewrite MitM", c3_sdp_rewrite),
        ("TLS countermeasure", c4_tls),
        ("codec properties", c5_codec),
        ("wire fuzzing", c6_wire_fuzz),
        ("determinism", c7_determinism),
        ("negotiation oracle", c8_negotiation),
        ("session-id discipline", c9_session_ids),
        ("energy-mode mismatch", c10_mode_mismatch),
    ];
    let mut failed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match verdict {
            Ok(detail) => println!("criterion {:>2} PASS {title}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {title}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
