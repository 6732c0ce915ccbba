use std::time::Instant;
use uraenas::data::{build_corrupted_suite, SynthSpec};
use uraenas::metrics::{ensemble_size_sweep, metric_triple, spearman};
use uraenas::trainer::{
    prediction_set, run_variant, DataBundle, DataConfig, EvalMode, RunConfig, TopologyProfile,
    Variant,
};
use uraenas::samplers::CsgldConfig;

fn base_cfg(seed: u64) -> RunConfig {
    RunConfig {
        variant: Variant::UraeNas,
        eta: 20.0,
        lambda: 1e-3,
        csgld: CsgldConfig {
            alpha0: 0.03,
            epochs: 8,
            cycles: 2,
            explore_fraction: 0.5,
            dataset_size: 0,
            batch_size: 50,
            paper_literal_update: false,
            grad_clip: Some(5.0),
            m: None,
        },
        m_theta: 5,
        m_w: 2,
        ensemble_size: 10,
        master_seed: 3000 + seed,
        data: DataConfig::Synthetic {
            spec: SynthSpec { classes: 10, height: 16, width: 16, channels: 3, noise: 8.0, ambiguity: 0.3 },
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            seed: 1000 + seed,
        },
        profile: TopologyProfile::Nb201,
        c0: 2,
        n_cells: 1,
        evaluation: EvalMode::ContinuousTheta,
        arch_batch: Some(250),
        theta_source: None,
        inherit_search_weights: false,
    }
}

fn main() {
    for s in 0..2u64 {
        let t0 = Instant::now();
        let cfg = base_cfg(s);
        let bundle = DataBundle::load(&cfg.data).unwrap();
        let suite = build_corrupted_suite(&bundle.test, 2000 + s).unwrap();
        println!("seed {s}: data+suite in {:.1}s", t0.elapsed().as_secs_f64());
        for variant in [Variant::UraeNas, Variant::UraeNasW, Variant::DrNas] {
            let t1 = Instant::now();
            let mut c = cfg.clone();
            c.variant = variant;
            let run = run_variant(&c, &bundle).unwrap();
            let t_train = t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            let preds = prediction_set(&c, &run.members, &bundle.test).unwrap();
            let all: Vec<usize> = (0..run.members.len()).collect();
            let ens = preds.ensemble_average(&all).unwrap();
            let clean = metric_triple(&ens, bundle.test.classes, &bundle.test.labels).unwrap();
            let mut csum = (0.0, 0.0, 0.0);
            let mut ccount = 0;
            for ((kind, sev), mut ds) in suite.clone() {
                if sev % 2 == 0 {
                    continue; // severities 1/3/5
                }
                ds.stats = bundle.test.stats.clone();
                let p = prediction_set(&c, &run.members, &ds).unwrap();
                let e = p.ensemble_average(&all).unwrap();
                let m = metric_triple(&e, ds.classes, &ds.labels).unwrap();
                csum = (csum.0 + m.accuracy, csum.1 + m.ece, csum.2 + m.nll);
                ccount += 1;
                let _ = kind;
            }
            let t_pred = t2.elapsed().as_secs_f64();
            let spear = if run.members.len() >= 4 {
                let sizes: Vec<usize> = (1..=run.members.len()).collect();
                let rows =
                    ensemble_size_sweep(&preds, &bundle.test.labels, &sizes, c.master_seed)
                        .unwrap();
                let xs: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
                let ys: Vec<f64> = rows.iter().map(|r| r.nll).collect();
                spearman(&xs, &ys).unwrap()
            } else {
                f64::NAN
            };
            println!(
                "seed {s} {variant:?}: members {} | clean acc {:.3} ece {:.3} nll {:.3} | corr({ccount}) acc {:.3} ece {:.3} nll {:.3} | spearman {spear:.2} | train {t_train:.0}s pred {t_pred:.0}s",
                run.members.len(),
                clean.accuracy, clean.ece, clean.nll,
                csum.0 / ccount as f64, csum.1 / ccount as f64, csum.2 / ccount as f64,
            );
        }
    }
}
