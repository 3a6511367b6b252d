use splitlearn::client::*;
use splitlearn::data::*;
use splitlearn::model::*;
use splitlearn::ops;
use splitlearn::tensor::Rng;
use std::time::Duration;

fn main() {
    let train = synthetic(512, 10, 28, 7);
    let spec = reference_model(1, 28, 10).unwrap();
    let plan = split(&spec, 2).unwrap();
    let full = init_parameters(&spec.layers, spec.input, &Rng::new(7).derive("init")).unwrap();
    let mut ext = full.slice(&plan.extractor);
    let mut cloud = full.slice(&plan.cloud);
    let mut cls = full.slice(&plan.classifier);
    let lr = 0.05f32;
    let cfg = ClientConfig { client_id: 1, depth: 2, epochs: 1, batch_size: 32, lr, seed: 7, share: false, barrier_timeout: Duration::from_secs(300), trace: false };
    let _ = &cfg;
    let order: Vec<usize> = (0..train.len()).collect();
    for (b, chunk) in order.chunks(32).enumerate().take(8) {
        let (x, y) = train.batch(chunk);
        let (a1, c1) = forward(&spec.layers, plan.extractor.clone(), &ext, &x).unwrap();
        let (a2, c2) = forward(&spec.layers, plan.cloud.clone(), &cloud, &a1).unwrap();
        let (logits, c3) = forward(&spec.layers, plan.classifier.clone(), &cls, &a2).unwrap();
        let lmax = logits.data().iter().cloned().fold(f32::MIN, f32::max);
        let (loss, dl) = ops::softmax_cross_entropy(&logits, &y).unwrap();
        let (d2, g3) = backward(&spec.layers, plan.classifier.clone(), &cls, &c3, &dl).unwrap();
        cls.sgd_step(&g3, lr).unwrap();
        let (d1, g2) = backward(&spec.layers, plan.cloud.clone(), &cloud, &c2, &d2).unwrap();
        cloud.sgd_step(&g2, lr).unwrap();
        let gmax = d1.data().iter().cloned().fold(f32::MIN, f32::max);
        let (_, g1) = backward(&spec.layers, plan.extractor.clone(), &ext, &c1, &d1).unwrap();
        ext.sgd_step(&g1, lr).unwrap();
        let wmax = ext.entries[0].tensor.data().iter().cloned().fold(f32::MIN, f32::max);
        println!("batch {b}: loss {loss:.4} logit_max {lmax:.2} grad_cut_max {gmax:.3e} w0_max {wmax:.3e}");
    }
}
