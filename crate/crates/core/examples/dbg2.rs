use owmmd::experiment::*;
use owmmd::metrics::{average_accuracy, backward_transfer, aggregate};
use owmmd::taskstream::generate;
use owmmd::regularizer::DistanceKind;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);

    let mut config = ExperimentConfig::default_demo(std::path::PathBuf::from("/tmp/sweep_out"));
    config.hyper.epochs_per_task = epochs;
    config.num_seeds = seeds;
    config.variants = vec![
        VariantConfig { gamma: Some(0.0), ..VariantConfig::named("derpp") },
        VariantConfig { gamma: Some(0.3), ..VariantConfig::named("mmd_g03") },
        VariantConfig { gamma: Some(2.0), ..VariantConfig::named("mmd_g2") },
        VariantConfig { gamma: Some(5.0), ..VariantConfig::named("mmd_g5") },
        VariantConfig { gamma: Some(0.3), distance: Some(DistanceKind::L2), ..VariantConfig::named("l2_g03") },
        VariantConfig { gamma: Some(1.0), distance: Some(DistanceKind::L2), ..VariantConfig::named("l2_g1") },
        VariantConfig { gamma: Some(3.0), distance: Some(DistanceKind::L2), ..VariantConfig::named("l2_g3") },
    ];
    let tasks = generate(&config.stream).unwrap();
    let records = run_records(&config, &tasks).unwrap();
    for v in ["derpp", "mmd_g03", "mmd_g2", "mmd_g5", "l2_g03", "l2_g1", "l2_g3"] {
        let rs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == v).collect();
        if rs.is_empty() { continue; }
        let accs: Vec<f64> = rs.iter().map(|r| average_accuracy(&r.class_il).unwrap()).collect();
        let bwts: Vec<f64> = rs.iter().map(|r| backward_transfer(&r.class_il).unwrap()).collect();
        // task-1 retention: a[N][1]
        let t1: Vec<f64> = rs.iter().map(|r| r.class_il.get(4, 0)).collect();
        let diag: Vec<f64> = rs.iter().map(|r| (0..5).map(|i| r.class_il.get(i, i)).sum::<f64>() / 5.0).collect();
        let (am, _) = aggregate(&accs).unwrap();
        let (bm, _) = aggregate(&bwts).unwrap();
        let (t1m, _) = aggregate(&t1).unwrap();
        let (dm, _) = aggregate(&diag).unwrap();
        println!("{v:8} acc {am:.4} bwt {bm:+.4} task1-final {t1m:.4} diag {dm:.4}");
    }
}
