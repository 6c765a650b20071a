use owmmd::experiment::*;
use owmmd::kernel::{mmd_unbiased, FeatureBatchPair, KernelSpec, median_pairwise_distance};
use owmmd::taskstream::generate;
use owmmd::trainer::*;

fn main() {
    let config = ExperimentConfig::default_demo(std::path::PathBuf::from("/tmp/x"));
    let tasks = generate(&config.stream).unwrap();
    let hp = HyperParams { gamma: 0.0, ..config.hyper.clone() };
    let cfg = config.regularizer.clone();
    // Train task 1+2 with gamma 0, then measure per-layer MMD teacher vs student on buffer batches.
    let mut state = init_state(16, &config.model.hidden, 10, &hp).unwrap();
    state.task_index = 1;
    train_task(&mut state, &tasks[0], &hp, &cfg).unwrap();
    state.teacher = Some(state.student.snapshot());
    state.task_index = 2;
    train_task(&mut state, &tasks[1], &hp, &cfg).unwrap();

    let teacher = state.teacher.clone().unwrap();
    let draws = draw_replay(&mut state.buffer, &hp, 2).unwrap();
    let rx = draws.reg_batch.unwrap();
    let tf = teacher.forward_features(&rx).unwrap();
    let sf = state.student.forward_features(&rx).unwrap();
    println!("after task 2 (gamma=0), per-layer teacher-vs-student on a buffer batch:");
    for k in 0..5 {
        let pair = FeatureBatchPair::new(tf[k].clone(), sf[k].clone()).unwrap();
        let mmd_med = mmd_unbiased(&KernelSpec::rbf_median_mixture(), &pair).unwrap();
        let med = median_pairwise_distance(&[&tf[k], &sf[k]]);
        let mmd_sharp = mmd_unbiased(&KernelSpec::rbf_fixed(vec![med/16.0, med/8.0, med/4.0, med/2.0, med]), &pair).unwrap();
        let l2: f64 = (0..rx.rows()).map(|i| owmmd::tensor::squared_distance(tf[k].row(i), sf[k].row(i))).sum::<f64>() / rx.rows() as f64;
        let scale: f64 = tf[k].data().iter().map(|v| v*v).sum::<f64>() / tf[k].len() as f64;
        println!("  layer {k}: median {med:8.3}  mmd(default) {mmd_med:9.5}  mmd(sharp) {mmd_sharp:9.5}  l2 {l2:9.4}  feat^2 {scale:8.3}");
    }
    // and the cross-entropy scale at that point
    let x_rows: Vec<&[f64]> = tasks[1].train[..32].iter().map(|(x, _)| x.data()).collect();
    let labels: Vec<usize> = tasks[1].train[..32].iter().map(|(_, y)| *y).collect();
    let x = owmmd::Tensor::from_rows(&x_rows).unwrap();
    let probs = owmmd::network::softmax_rows(&state.student.logits(&x).unwrap());
    let mut ce = 0.0;
    for (i, y) in labels.iter().enumerate() { ce -= probs.get2(i, *y).max(1e-300).ln(); }
    println!("current-task CE ~ {:.4}", ce / 32.0);
}
