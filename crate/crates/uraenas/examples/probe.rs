use uraenas::data::SynthSpec;
use uraenas::metrics::metric_triple;
use uraenas::samplers::CsgldConfig;
use uraenas::trainer::{
    prediction_set, run_variant, search_phase, DataBundle, DataConfig, EvalMode, RunConfig,
    TopologyProfile, Variant,
};

fn cfg(seed: u64, lambda: f64) -> RunConfig {
    RunConfig {
        variant: Variant::UraeNas,
        eta: 20.0,
        lambda,
        csgld: CsgldConfig {
            alpha0: 0.03,
            epochs: 5,
            cycles: 1,
            explore_fraction: 0.5,
            dataset_size: 0,
            batch_size: 50,
            paper_literal_update: false,
            grad_clip: Some(5.0),
            m: None,
        },
        m_theta: 2,
        m_w: 5,
        ensemble_size: 10,
        master_seed: 3000 + seed,
        data: DataConfig::Synthetic {
            spec: SynthSpec {
                classes: 10,
                height: 16,
                width: 16,
                channels: 3,
                noise: 8.0,
                ambiguity: 0.3,
            },
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
    for seed in [1u64, 0] {
        let lambda = 1e-3;
        let c = cfg(seed, lambda);
        let bundle = DataBundle::load(&c.data).unwrap();
        let search = search_phase(&c, &bundle).unwrap();
        println!("seed {seed} lambda {lambda}: beta (mean theta / sum beta) per edge:");
        for (e, b) in &search.params.b {
            let exps: Vec<f64> = b.iter().map(|x| x.exp()).collect();
            let s: f64 = exps.iter().sum();
            let means: Vec<String> = exps.iter().map(|x| format!("{:.2}", x / s)).collect();
            println!("  {e:?}: mean {means:?} sum_beta {s:.2}");
        }
        let run = run_variant(&c, &bundle).unwrap();
        let preds = prediction_set(&c, &run.members, &bundle.test).unwrap();
        let k = bundle.test.classes;
        for (i, m) in run.members.iter().enumerate() {
            let p = preds.member(i);
            let t = metric_triple(p, k, &bundle.test.labels).unwrap();
            println!(
                "  member {i} (arch {}, epoch {}): acc {:.3} nll {:.3} ece {:.3}",
                m.m2, m.epoch, t.accuracy, t.nll, t.ece
            );
        }
        let all: Vec<usize> = (0..run.members.len()).collect();
        let ens = preds.ensemble_average(&all).unwrap();
        let t = metric_triple(&ens, k, &bundle.test.labels).unwrap();
        let conf: f64 = ens.chunks(k).map(|p| p.iter().cloned().fold(f64::MIN, f64::max)).sum::<f64>()
            / (ens.len() / k) as f64;
        println!("  ensemble: acc {:.3} nll {:.3} ece {:.3} conf {:.3}", t.accuracy, t.nll, t.ece, conf);
    }
}
