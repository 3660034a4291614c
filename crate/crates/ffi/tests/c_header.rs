//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "unitkit.h"

int main(void) {
    uint32_t a[] = {5, 5, 5, 2, 2, 9};
    uint32_t out[6];
    size_t n = 0;
    if (uk_dedup(a, 6, out, &n) != UK_STATUS_OK || n != 3 || out[2] != 9) return 1;

    size_t d = 0;
    uint32_t b[] = {5, 2, 8};
    if (uk_levenshtein(out, n, b, 3, &d) != UK_STATUS_OK || d != 1) return 2;

    UkCodebook *cb = NULL;
    if (uk_codebook_load("/nonexistent.kmcb", &cb) != UK_STATUS_IO) return 3;
    if (strlen(uk_last_error_message()) == 0) return 4;

    float frames[] = {0.f, 0.f, 0.1f, 0.f, 5.f, 5.f, 5.1f, 5.f};
    if (uk_codebook_fit(frames, 4, 2, 2, 20, 1, &cb) != UK_STATUS_OK) return 5;
    uint32_t units[4];
    if (uk_codebook_assign(cb, frames, 4, 2, units) != UK_STATUS_OK) return 6;
    uk_codebook_free(cb);
    if (units[0] != units[1] || units[2] != units[3] || units[0] == units[2]) return 7;

    printf("ok %s\n", uk_version());
    return 0;
}
"#;

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test-binary> -> target/<profile>
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let lib = dir.join("libunitkit_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("ok "), "{stdout}");
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/unitkit.h"))
            .unwrap();
    for name in [
        "uk_last_error_message",
        "uk_version",
        "uk_codebook_load",
        "uk_codebook_fit",
        "uk_codebook_save",
        "uk_codebook_assign",
        "uk_codebook_free",
        "uk_predictor_load",
        "uk_predictor_predict",
        "uk_predictor_free",
        "uk_levenshtein",
        "uk_uer",
        "uk_dedup",
        "uk_sdr",
        "typedef struct UkCodebook UkCodebook",
        "UK_STATUS_BUFFER_TOO_SMALL = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
