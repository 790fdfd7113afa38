//! Writes the bundled example datasets and DGP specs into `data/`.
//!
//! ```text
//! cargo run -p triplediff-core --example generate_data -- data
//! ```

use std::fs::{self, File};
use std::path::Path;

use triplediff::simlab::{AgeForm, Dgp, DgpSpec, Effect, Layout, Sampling};
use triplediff::{write_panel, write_rc, Comparison, DesignSpec, Estimand, Estimator};

fn save_spec(dir: &Path, name: &str, spec: &DgpSpec) {
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(dir.join(name), text + "\n").expect("write spec");
}

fn main() -> triplediff::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    let root = Path::new(&root);
    let dgp_dir = root.join("dgp");
    fs::create_dir_all(&dgp_dir).expect("create data/dgp");

    let base = DgpSpec::default();
    let staggered = DgpSpec {
        gamma: 1.0,
        layout: Layout::Staggered { cohorts: vec![2, 3], last: 3 },
        aggregation_weights: Some(vec![0.5, 0.25, 0.25]),
        trim_drop: true,
        ..base.clone()
    };
    let specs = [
        ("null.json", DgpSpec { effect: Effect::None, ..base.clone() }),
        ("gamma0.json", base.clone()),
        ("gamma0.2.json", DgpSpec { gamma: 0.2, ..base.clone() }),
        ("gamma1.json", DgpSpec { gamma: 1.0, ..base.clone() }),
        ("case2_ps_wrong.json", DgpSpec { gamma: 1.0, ps_wrong: true, ..base.clone() }),
        ("case3_or_wrong.json", DgpSpec { gamma: 1.0, or_wrong: true, ..base.clone() }),
        ("case4_both_wrong.json", DgpSpec { gamma: 1.0, ps_wrong: true, or_wrong: true, ..base.clone() }),
        ("staggered.json", staggered.clone()),
        ("rc.json", DgpSpec { gamma: 1.0, n: 2000, sampling: Sampling::Rc, ..base.clone() }),
        ("age_bins.json", DgpSpec::calibrated(AgeForm::Bins)?),
    ];
    for (name, spec) in &specs {
        save_spec(&dgp_dir, name, spec);
    }

    let (panel, _) = Dgp::new(&DgpSpec { n: 2000, ..staggered })?.generate(2024)?;
    write_panel(&panel, File::create(root.join("panel_example.csv")).expect("create panel csv"))?;
    let (rc, _) = Dgp::new(&DgpSpec { gamma: 1.0, n: 4000, ..base })?.generate_rc(2025)?;
    write_rc(&rc, File::create(root.join("rc_example.csv")).expect("create rc csv"))?;

    let mut design = DesignSpec::new(Estimand::Cdatt, Estimator::Dr, "targeted", "untargeted");
    design.comparison = Some(Comparison::Never);
    let text = serde_json::to_string_pretty(&design).expect("design serializes");
    fs::write(root.join("design_example.json"), text + "\n").expect("write design");
    Ok(())
}
