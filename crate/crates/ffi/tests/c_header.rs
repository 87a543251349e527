//! Compiles a C program against the generated header and links the shared
//! library, so the header and the exported symbols stay in agreement.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "foamflow.h"

int main(void) {
    FfDict *dict = NULL;
    char *value = NULL;
    if (ff_dict_parse("solver icoFoam;\nsub { n 3; }\n", &dict) != FF_STATUS_OK) return 10;
    if (ff_dict_lookup(dict, "sub/n", &value) != FF_STATUS_OK) return 11;
    if (strcmp(value, "3") != 0) return 12;
    ff_string_free(value);
    if (ff_dict_lookup(dict, "missing", &value) != FF_STATUS_NOT_FOUND) return 13;
    if (ff_last_error() == NULL) return 14;
    ff_dict_free(dict);
    if (ff_dict_parse("a {", &dict) != FF_STATUS_PARSE_ERROR) return 15;
    printf("%s\n", ff_version());
    return 0;
}
"#;

/// `target/<profile>` holding this test binary and the built library.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("foamflow.h").is_file());
    let lib_dir = profile_dir();
    assert!(
        lib_dir.join("libfoamflow_ffi.so").is_file(),
        "shared library missing in {}",
        lib_dir.display()
    );

    let work = tempfile::tempdir().unwrap();
    let source = work.path().join("main.c");
    std::fs::write(&source, PROGRAM).unwrap();
    let exe = work.path().join("main");
    let compiler = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&compiler)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&source)
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lfoamflow_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("C compiler {compiler} unavailable: {e}"));
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}
