//! Regenerates the seed corpus under `fuzz/corpus/`. Run after changing any
//! of the three text formats:
//!
//! ```text
//! cargo run -p probin --example gen_fuzz_corpus
//! ```

use std::fs;
use std::path::PathBuf;

use probin::domain::{
    build_interval_domain, build_planar_annulus, build_planar_square, build_radial_domain,
    mesh_text::write_mesh_text, GammaEnd, RadialPartition,
};
use probin::eigensolver::{EigenSolveSettings, RobinField};
use probin::inverse::{forward_measure, write_measurement_csv};

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");

    let mesh_dir = root.join("mesh_text");
    fs::create_dir_all(&mesh_dir).unwrap();
    let meshes = [
        ("interval", build_interval_domain(6, GammaEnd::Right).unwrap()),
        ("interval_both", build_interval_domain(4, GammaEnd::Both).unwrap()),
        ("ball", build_radial_domain(5, 0.0, 1.0, 2, RadialPartition::GammaOuter).unwrap()),
        ("shell", build_radial_domain(4, 0.5, 1.25, 3, RadialPartition::GammaInner).unwrap()),
        ("square", build_planar_square(3).unwrap()),
        ("annulus", build_planar_annulus(8, 2, 0.5, 1.0).unwrap()),
    ];
    for (name, d) in meshes {
        let path = mesh_dir.join(format!("{name}.txt"));
        fs::write(&path, write_mesh_text(&d).unwrap()).unwrap();
        println!("wrote {}", path.display());
    }

    let cfg_dir = root.join("config_text");
    fs::create_dir_all(&cfg_dir).unwrap();
    let configs: [(&str, &str); 4] = [
        ("minimal", "[run]\nsubcommand = solve\n"),
        (
            "solve_radial",
            "# radial solve with explicit solver settings\n[run]\nsubcommand = solve\nseed = 7\n\
             [domain]\nmode = radial\ncells = 64\nspace_dim = 3\nr_inner = 0.5\nr_outer = 2\n\
             partition = inner\n[problem]\np = 2.5\nh_values = 0.5, 2\n\
             [solver]\ntol_lambda = 1e-9\nmax_outer = 500\ndelta_inner = none\n",
        ),
        (
            "sweep",
            "[run]\nsubcommand = coating-sweep\nthreads = 2\n[domain]\ncells = 48\n\
             [coating]\nepsilons = 0.1, 0.05, 0.025\nrho = 1.5\nlayer_cells = 8\n",
        ),
        (
            "limits",
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = pinf\np_grid = 2, 3, 4\nrho = 0.5\n",
        ),
    ];
    for (name, text) in configs {
        let path = cfg_dir.join(format!("{name}.cfg"));
        fs::write(&path, text).unwrap();
        println!("wrote {}", path.display());
    }

    // the measurement target parses against interval(8, Right); seeds must
    // name the same Dirichlet faces to get past the header check
    let csv_dir = root.join("measurement_csv");
    fs::create_dir_all(&csv_dir).unwrap();
    let d = build_interval_domain(8, GammaEnd::Right).unwrap();
    let h = RobinField::constant(&d, 1.0).unwrap();
    let m = forward_measure(&d, 2.0, &h, &EigenSolveSettings::default()).unwrap();
    let text = write_measurement_csv(&m);
    fs::write(csv_dir.join("interval.csv"), &text).unwrap();
    fs::write(csv_dir.join("interval_crlf.csv"), text.replace('\n', "\r\n")).unwrap();
    println!("wrote {}", csv_dir.join("interval.csv").display());
    println!("wrote {}", csv_dir.join("interval_crlf.csv").display());
}
