use owmmd::experiment::*;
use owmmd::metrics::{average_accuracy, backward_transfer, aggregate};
use owmmd::taskstream::{TaskDataset, StreamSpec, generate};
use owmmd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Orthogonal signed-basis placement with random rotation (regime A).
fn ortho_blobs(spec: &StreamSpec) -> Vec<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let classes = spec.num_tasks * spec.classes_per_task;
    let radius = 4.0 * spec.noise_scale;
    // gram-schmidt rotation
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64,_>(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) { *vi -= dot * bi; }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 { for vi in &mut v { *vi /= n; } basis.push(v); }
    }
    let fine = std::env::var("FINE").is_ok();
    let centers: Vec<Vec<f64>> = if fine {
        // Task t sits far out along one direction; its two classes differ by
        // a small offset along a second, task-private direction.
        (0..classes).map(|c| {
            let t = c / 2;
            let far = 10.0 * spec.noise_scale;
            let near = 4.0 * spec.noise_scale;
            let mut center: Vec<f64> = basis[(2 * t) % d].iter().map(|&b| b * far).collect();
            if c % 2 == 1 {
                for (ci, bi) in center.iter_mut().zip(&basis[(2 * t + 1) % d]) {
                    *ci += near * bi;
                }
            }
            center
        }).collect()
    } else {
        (0..classes).map(|c| {
            basis[c % d].iter().map(|&b| b * radius * if c < d {1.0} else {-1.0}).collect()
        }).collect()
    };
    let mut tasks = Vec::new();
    for t in 0..spec.num_tasks {
        let class_set: Vec<usize> = (t*spec.classes_per_task..(t+1)*spec.classes_per_task).collect();
        let mut train = Vec::new(); let mut test = Vec::new();
        for &c in &class_set {
            for _ in 0..spec.train_per_class {
                let x: Vec<f64> = centers[c].iter().map(|&m| m + spec.noise_scale * rng.sample::<f64,_>(StandardNormal)).collect();
                train.push((Tensor::new(vec![d], x).unwrap(), c));
            }
            for _ in 0..spec.test_per_class {
                let x: Vec<f64> = centers[c].iter().map(|&m| m + spec.noise_scale * rng.sample::<f64,_>(StandardNormal)).collect();
                test.push((Tensor::new(vec![d], x).unwrap(), c));
            }
        }
        tasks.push(TaskDataset { train, test, class_set });
    }
    tasks
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let regime = args.get(1).cloned().unwrap_or("ortho".into());
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let eta: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let alpha: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let beta: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let seeds: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(4);

    let mut config = ExperimentConfig::default_demo(std::path::PathBuf::from("/tmp/x"));
    config.hyper.eta = eta; config.hyper.alpha = alpha; config.hyper.beta = beta;
    config.num_seeds = seeds;
    if let Some(mults) = args.get(7) {
        config.regularizer.kernel.bandwidths = mults.split(',').map(|v| v.parse().unwrap()).collect();
    }
    if let Some(adapt) = args.get(8) {
        config.regularizer.adaptive = adapt == "on";
    }
    if let Ok(w) = std::env::var("WIDTH") {
        let w: usize = w.parse().unwrap();
        config.model.hidden = vec![w; 5];
    }
    if let Ok(b) = std::env::var("BATCH") {
        config.hyper.batch_size = b.parse().unwrap();
    }
    if std::env::var("FIXEDBW").is_ok() {
        config.regularizer.kernel = owmmd::kernel::KernelSpec::rbf_fixed(vec![0.5, 1.0, 2.0, 4.0, 8.0]);
    }
    config.variants = vec![
        VariantConfig { gamma: Some(gamma), ..VariantConfig::named("owmmd") },
        VariantConfig { gamma: Some(0.0), ..VariantConfig::named("derpp") },
    ];
    let tasks = if regime == "ortho" { ortho_blobs(&config.stream) } else { generate(&config.stream).unwrap() };
    let records = run_records(&config, &tasks).unwrap();
    let get = |v: &str, f: &dyn Fn(&RunRecord) -> f64| -> Vec<f64> {
        records.iter().filter(|r| r.variant == v).map(f).collect()
    };
    let acc_o = get("owmmd", &|r| average_accuracy(&r.class_il).unwrap());
    let acc_d = get("derpp", &|r| average_accuracy(&r.class_il).unwrap());
    let bwt_o = get("owmmd", &|r| backward_transfer(&r.class_il).unwrap());
    let bwt_d = get("derpp", &|r| backward_transfer(&r.class_il).unwrap());
    let se = |a: &[f64], b: &[f64]| -> f64 {
        let (_, sa) = aggregate(a).unwrap(); let (_, sb) = aggregate(b).unwrap();
        ((sa*sa/a.len() as f64) + (sb*sb/b.len() as f64)).sqrt()
    };
    let (amo, _) = aggregate(&acc_o).unwrap(); let (amd, _) = aggregate(&acc_d).unwrap();
    let (bmo, _) = aggregate(&bwt_o).unwrap(); let (bmd, _) = aggregate(&bwt_d).unwrap();
    println!("{regime} g={gamma} eta={eta} a={alpha} b={beta}: owmmd {amo:.4}/{bmo:+.4}  derpp {amd:.4}/{bmd:+.4}  dacc {:+.4} (se {:.4}) dbwt {:+.4} (se {:.4})",
        amo-amd, se(&acc_o, &acc_d), bmo-bmd, se(&bwt_o, &bwt_d));
}
