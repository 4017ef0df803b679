mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use highlighter_core::guidance::{Conversation, GenerationResult, GuidanceConfig};
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn hl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn weights(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("w{seed}.thw"));
    let config = fixture("default_config.json");
    ok(&[
        "init-weights",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

fn tokens(json: &str) -> Vec<u32> {
    serde_json::from_str::<GenerationResult>(json).unwrap().tokens
}

#[test]
fn unit_parameters_print_the_vanilla_text() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), FIXTURE_SEED);
    let w = w.to_str().unwrap();
    let vanilla = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--vanilla", "--json"]);
    let unit = ok(&[
        "gen",
        "--model",
        w,
        "--prompt",
        FIXTURE_PROMPT,
        "--highlight",
        "0:4",
        "--gamma",
        "1",
        "--beta",
        "1",
        "--json",
    ]);
    assert_eq!(tokens(&vanilla), tokens(&unit));
    let vanilla = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--vanilla"]);
    let unit =
        ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--highlight", "0:4", "--gamma", "1", "--beta", "1"]);
    assert_eq!(vanilla, unit);
}

const HIGHLIGHTED: [u32; 32] = [
    71, 11, 209, 66, 256, 191, 135, 218, 23, 19, 220, 63, 64, 228, 130, 88, 212, 167, 81, 242, 76, 153, 55, 48, 209,
    43, 141, 252, 162, 76, 171, 113,
];
const VANILLA: [u32; 32] = [
    71, 11, 209, 66, 256, 191, 135, 218, 23, 19, 220, 63, 64, 228, 130, 88, 212, 167, 81, 242, 76, 153, 55, 48, 125,
    145, 208, 3, 208, 209, 238, 115,
];

#[test]
fn golden_highlight_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), FIXTURE_SEED);
    let w = w.to_str().unwrap();
    let guided = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--highlight", "0:4", "--json"]);
    let vanilla = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--vanilla", "--json"]);
    assert_eq!(tokens(&guided), HIGHLIGHTED);
    assert_eq!(tokens(&vanilla), VANILLA);
    let guided = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--highlight", "0:4"]);
    let vanilla = ok(&["gen", "--model", w, "--prompt", FIXTURE_PROMPT, "--vanilla"]);
    assert_ne!(guided, vanilla);
}

#[test]
fn json_output_equals_library_result() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 3);
    let out = ok(&[
        "gen",
        "--model",
        w.to_str().unwrap(),
        "--prompt",
        "library check",
        "--highlight",
        "2:6",
        "--gamma",
        "2",
        "--max-tokens",
        "9",
        "--json",
    ]);
    let cli: GenerationResult = serde_json::from_str(&out).unwrap();
    let model = highlighter::weights::load_model(&w, None).unwrap();
    let cfg = GuidanceConfig { gamma: 2.0, max_new_tokens: 9, ..GuidanceConfig::default() };
    let lib = Conversation::new().continue_round(&model, "library check", &[(2, 6)], cfg, false, &mut ()).unwrap();
    assert_eq!(cli, lib);
}

#[test]
fn image_region_generation_runs() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 4);
    let patches = dir.path().join("patches.json");
    let region = dir.path().join("region.json");
    std::fs::write(&patches, serde_json::json!({ "grid": 8, "features": patch_features(8, 32, 2) }).to_string())
        .unwrap();
    let bits: Vec<u8> = (0..64).map(|i| u8::from(i < 16)).collect();
    std::fs::write(&region, serde_json::json!({ "bits": bits }).to_string()).unwrap();
    for vision in ["direct", "qformer"] {
        let out = ok(&[
            "gen",
            "--model",
            w.to_str().unwrap(),
            "--prompt",
            "what is shown",
            "--image",
            patches.to_str().unwrap(),
            "--region",
            region.to_str().unwrap(),
            "--vision",
            vision,
            "--max-tokens",
            "4",
            "--json",
        ]);
        assert_eq!(tokens(&out).len(), 4);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = hl(&["gen", "--prompt", "hi"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));

    let w = weights(dir.path(), 1);
    let w = w.to_str().unwrap();
    assert_eq!(hl(&["gen", "--model", w, "--prompt", "hi", "--highlight", "0:9"]).status.code(), Some(2));
    assert_eq!(hl(&["gen", "--model", w, "--prompt", "hi", "--max-tokens", "600"]).status.code(), Some(4));
    let config = fixture("default_config.json");
    assert_eq!(hl(&["gen", "--model", config.to_str().unwrap(), "--prompt", "hi"]).status.code(), Some(3));
    let truncated = dir.path().join("short.thw");
    std::fs::write(&truncated, &std::fs::read(w).unwrap()[..100]).unwrap();
    assert_eq!(hl(&["gen", "--model", truncated.to_str().unwrap(), "--prompt", "hi"]).status.code(), Some(3));
    assert_eq!(hl(&["gen", "--model", "/nonexistent/w.thw", "--prompt", "hi"]).status.code(), Some(1));
}

fn sha(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn seeded_weights_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = sha(&weights(a.path(), FIXTURE_SEED));
    assert_eq!(first, sha(&weights(b.path(), FIXTURE_SEED)));
    assert_eq!(first, "81d18d67d7a99b3145e1311b391f2ec4a2141e58ab2c3a19be7314821a896dca");
    assert_ne!(first, sha(&weights(a.path(), FIXTURE_SEED + 1)));
}

fn report(name: &str) -> highlighter::snapshot::ProbeReport {
    let path = fixture(name);
    let text = ok(&["probe", "--in", path.to_str().unwrap(), "--report"]);
    assert!(text.contains("G_x: ") && text.contains("G_x/G_y: "));
    serde_json::from_str(&ok(&["probe", "--in", path.to_str().unwrap(), "--json"])).unwrap()
}

#[test]
fn probe_reports_on_fixtures() {
    let flat = report("constant_snapshot.json");
    assert_eq!((flat.g_x, flat.g_y, flat.ratio), (0.0, 0.0, None));
    let band = report("band_snapshot.json");
    assert_eq!(band.g_y, 0.0);
    assert!(band.g_x > 0.0);
    let again = report("band_snapshot.json");
    assert_eq!(band, again);
}

#[test]
fn probe_snapshot_from_generation() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path(), 2);
    for name in ["snap.json", "snap.thw"] {
        let snap = dir.path().join(name);
        ok(&[
            "gen",
            "--model",
            w.to_str().unwrap(),
            "--prompt",
            "probe me now",
            "--highlight",
            "0:5",
            "--max-tokens",
            "6",
            "--probe",
            snap.to_str().unwrap(),
        ]);
        let r = report_path(&snap);
        assert_eq!(r.generation_rows, 6);
        assert!(r.contribution_mean > 0.0 && r.contribution_mean < 1.0);
    }
}

fn report_path(path: &Path) -> highlighter::snapshot::ProbeReport {
    serde_json::from_str(&ok(&["probe", "--in", path.to_str().unwrap(), "--json"])).unwrap()
}
