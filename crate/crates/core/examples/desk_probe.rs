//! Probe run of the desk-scale pipeline: simulates the dataset, trains each
//! mode for a configurable number of epochs, and prints timing plus the
//! resulting test RMSE table. Useful for sizing changes before committing to
//! the full 20-epoch acceptance run.

use spisr_core::forward::make_pulse;
use spisr_core::io::desk_config;
use spisr_core::metrics::{build_report, EvalModel};
use spisr_core::runner::{run_simulate, run_train, load_split};
use spisr_core::io::manifest::DatasetManifest;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let tmp = std::env::temp_dir().join(format!("desk_probe_{seed}"));
    let _ = std::fs::remove_dir_all(&tmp);
    let data_dir = tmp.join("data");

    let mut cfg = desk_config("pukl_e", seed);
    cfg.trainer.epochs = epochs;

    let t0 = Instant::now();
    run_simulate(&cfg, &data_dir).expect("simulate");
    println!("simulate: {:.1?}", t0.elapsed());

    let manifest = DatasetManifest::load(&data_dir).unwrap();
    let test_set = load_split(&data_dir, &manifest, &manifest.test).unwrap();
    let pulse = make_pulse(cfg.pulse_fwhm, cfg.pulse_support).unwrap();
    let scale = cfg.scale_factor().unwrap();

    let mut nets = Vec::new();
    for mode in ["pukl_e", "pukl", "sup"] {
        let mut mc = cfg.clone();
        mc.trainer.mode = mode.into();
        let t = Instant::now();
        let run = run_train(&mc, &data_dir, &tmp.join(format!("train_{mode}")), false)
            .expect("train");
        let last = run.history.last().unwrap();
        println!(
            "train {mode}: {:.1?} ({} epochs, loss {:.4}, val_rmse {:?})",
            t.elapsed(),
            run.history.len(),
            last.l_total,
            last.val_rmse
        );
        nets.push((mode.to_string(), run.net));
    }

    let mut models = vec![EvalModel::Trilinear];
    for (name, net) in &nets {
        models.push(EvalModel::Net { name: name.clone(), net });
    }
    let report = build_report(&models, &test_set, scale, &pulse, "probe", "probe").unwrap();
    print!("{}", report.to_table());
    let tri = report.row("trilinear").unwrap().mean_rmse;
    let pe = report.row("pukl_e").unwrap().mean_rmse;
    let pu = report.row("pukl").unwrap().mean_rmse;
    let sup = report.row("sup").unwrap().mean_rmse;
    println!("\npukl_e/trilinear = {:.3} (need < 0.7)", pe / tri);
    println!("pukl_e < pukl: {}", pe < pu);
    println!("pukl < trilinear: {}", pu < tri);
    println!("pukl_e/sup = {:.3} (need <= 1.3)", pe / sup);
    println!("total: {:.1?}", t0.elapsed());
}
