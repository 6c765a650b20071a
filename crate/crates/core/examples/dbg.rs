use std::time::Instant;
use owmmd::experiment::*;
use owmmd::metrics::{average_accuracy, backward_transfer, aggregate};
use owmmd::taskstream::generate;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // args: gamma eta alpha beta seeds epochs [batch] [widths]
    let gamma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let eta: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let alpha: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let beta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let seeds: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);
    let epochs: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(50);
    let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(32);
    let width: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(32);

    let mut config = ExperimentConfig::default_demo(std::path::PathBuf::from("/tmp/sweep_out"));
    config.hyper.gamma = gamma;
    config.hyper.eta = eta;
    config.hyper.alpha = alpha;
    config.hyper.beta = beta;
    config.hyper.epochs_per_task = epochs;
    config.hyper.batch_size = batch;
    config.model.hidden = vec![width; 5];
    config.num_seeds = seeds;

    let tasks = generate(&config.stream).unwrap();
    let t0 = Instant::now();
    let records = match run_records(&config, &tasks) {
        Ok(r) => r,
        Err(e) => { println!("RUN FAILED: {e}"); return; }
    };
    let elapsed = t0.elapsed().as_secs_f64();

    for variant in ["owmmd", "derpp"] {
        let accs: Vec<f64> = records.iter().filter(|r| r.variant == variant)
            .map(|r| average_accuracy(&r.class_il).unwrap()).collect();
        let bwts: Vec<f64> = records.iter().filter(|r| r.variant == variant)
            .map(|r| backward_transfer(&r.class_il).unwrap()).collect();
        let (am, asd) = aggregate(&accs).unwrap();
        let (bm, bsd) = aggregate(&bwts).unwrap();
        println!("{variant:8} class-il acc {am:.4} +/- {asd:.4}   bwt {bm:.4} +/- {bsd:.4}");
        println!("   accs: {:?}", accs.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    let get = |v: &str, f: &dyn Fn(&RunRecord) -> f64| -> Vec<f64> {
        records.iter().filter(|r| r.variant == v).map(f).collect()
    };
    let acc_o = get("owmmd", &|r| average_accuracy(&r.class_il).unwrap());
    let acc_d = get("derpp", &|r| average_accuracy(&r.class_il).unwrap());
    let bwt_o = get("owmmd", &|r| backward_transfer(&r.class_il).unwrap());
    let bwt_d = get("derpp", &|r| backward_transfer(&r.class_il).unwrap());
    let pooled_se = |a: &[f64], b: &[f64]| -> f64 {
        let (_, sa) = aggregate(a).unwrap();
        let (_, sb) = aggregate(b).unwrap();
        ((sa * sa / a.len() as f64) + (sb * sb / b.len() as f64)).sqrt()
    };
    let d_acc = aggregate(&acc_o).unwrap().0 - aggregate(&acc_d).unwrap().0;
    let d_bwt = aggregate(&bwt_o).unwrap().0 - aggregate(&bwt_d).unwrap().0;
    println!("acc gap {d_acc:+.4} vs pooled SE {:.4}  -> {}", pooled_se(&acc_o, &acc_d), if d_acc > pooled_se(&acc_o, &acc_d) {"PASS"} else {"fail"});
    println!("bwt gap {d_bwt:+.4} vs pooled SE {:.4}  -> {}", pooled_se(&bwt_o, &bwt_d), if d_bwt > pooled_se(&bwt_o, &bwt_d) {"PASS"} else {"fail"});
    println!("elapsed {elapsed:.1}s for {} runs (2 cores)", records.len());
}
