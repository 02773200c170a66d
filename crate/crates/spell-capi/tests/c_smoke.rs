//! Compiles a small C client against `include/spell.h`, links the built
//! shared library, and runs it end to end on a generated dataset. This is
//! the proof that the committed header matches the exported ABI.

use spell_core::io::checkpoint::save_checkpoint;
use spell_core::io::synth::{generate, SynthMode, SynthSpec};
use spell_core::io::tracks::write_tracks;
use spell_core::model::{ModelConfig, SpellParams};
use std::path::{Path, PathBuf};
use std::process::Command;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `cargo build` copies the shared library into `target/<profile>/`;
/// `cargo test` leaves it in `target/<profile>/deps/`. Accept either.
fn library_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| manifest_dir().join("../../target"));
    let profile = target.join(if cfg!(debug_assertions) { "debug" } else { "release" });
    for dir in [profile.clone(), profile.join("deps")] {
        if dir.join("libspell_capi.so").exists() {
            return dir;
        }
    }
    profile
}

const C_CLIENT: &str = r#"
#include <stdio.h>
#include <string.h>
#include "spell.h"

int main(int argc, char **argv) {
    if (argc != 6) { fprintf(stderr, "usage: client ckpt tracks features index out\n"); return 2; }
    if (spell_version() == NULL || strlen(spell_version()) == 0) return 3;

    SpellDetector *d = NULL;
    if (spell_detector_load(argv[1], &d) != SPELL_STATUS_OK) {
        fprintf(stderr, "load: %s\n", spell_last_error_message());
        return 4;
    }

    uint64_t params = 0;
    if (spell_detector_param_count(d, &params) != SPELL_STATUS_OK || params == 0) return 5;

    if (spell_detector_infer(d, argv[2], argv[3], argv[4], 10, 0.6, argv[5]) != SPELL_STATUS_OK) {
        fprintf(stderr, "infer: %s\n", spell_last_error_message());
        return 6;
    }

    /* Null argument must fail cleanly with a message. */
    if (spell_detector_infer(d, NULL, argv[3], argv[4], 10, 0.6, argv[5])
            != SPELL_STATUS_NULL_ARGUMENT) return 7;
    if (strlen(spell_last_error_message()) == 0) return 8;

    spell_detector_free(d);
    spell_detector_free(NULL);
    printf("params=%llu\n", (unsigned long long)params);
    return 0;
}
"#;

fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let spec = SynthSpec {
        mode: SynthMode::Separable,
        scenes: 2,
        identities: 2,
        duration: 3.0,
        fps: 4.0,
        visual_dim: 20,
        audio_dim: 20,
        ..SynthSpec::default()
    };
    let (boxes, store) = generate(&spec, 11).unwrap();
    let tracks = dir.join("tracks.csv");
    let feats = dir.join("features.bin");
    let index = dir.join("features_index.csv");
    write_tracks(&tracks, &boxes).unwrap();
    store.write(&feats, &index).unwrap();

    let config = ModelConfig {
        visual_dim: 20,
        audio_dim: 20,
        filter_dim: 8,
        edge_mlp_hidden: 8,
        ..ModelConfig::default()
    };
    let params = SpellParams::<f32>::init(config, 5).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &params).unwrap();
    (ckpt, tracks, feats, index)
}

#[test]
fn header_declares_every_exported_symbol() {
    let header = std::fs::read_to_string(manifest_dir().join("include/spell.h")).unwrap();
    for symbol in [
        "spell_version",
        "spell_last_error_message",
        "spell_detector_load",
        "spell_detector_free",
        "spell_detector_param_count",
        "spell_detector_infer",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}; regenerate it");
    }
    for constant in [
        "SPELL_STATUS_OK = 0",
        "SPELL_STATUS_NULL_ARGUMENT = 1",
        "SPELL_STATUS_INVALID_UTF8 = 2",
        "SPELL_STATUS_IO_ERROR = 3",
        "SPELL_STATUS_PARSE_ERROR = 4",
        "SPELL_STATUS_INVALID_INPUT = 5",
        "SPELL_STATUS_NUMERIC_ERROR = 6",
        "SPELL_STATUS_PANIC = 7",
    ] {
        assert!(header.contains(constant), "header is missing {constant}; regenerate it");
    }
}

#[test]
fn c_client_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, tracks, feats, index) = fixture(dir.path());
    let out_csv = dir.path().join("preds.csv");

    let source = dir.path().join("client.c");
    std::fs::write(&source, C_CLIENT).unwrap();
    let client = dir.path().join("client");
    let lib_dir = library_dir();
    assert!(
        lib_dir.join("libspell_capi.so").exists(),
        "shared library not found in {}",
        lib_dir.display()
    );

    let compile = Command::new("cc")
        .arg(&source)
        .arg("-o")
        .arg(&client)
        .arg("-I")
        .arg(manifest_dir().join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lspell_capi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-Wall")
        .arg("-Werror")
        .output()
        .expect("cc not available");
    assert!(
        compile.status.success(),
        "compile failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&client)
        .args([&ckpt, &tracks, &feats, &index, &out_csv])
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "client exited {:?}:\n{}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.starts_with("params="), "unexpected stdout: {stdout}");

    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("video_id,time,entity_id,score\n"));
    // 2 scenes x 2 identities x 12 frames.
    assert_eq!(csv.lines().count(), 1 + 48);
}
