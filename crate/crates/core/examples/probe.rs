use std::time::Instant;
use swanvox::network::*;
use swanvox::synthetic::shape_set;
use swanvox::volume::{normalize, positional_encode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let set = shape_set(8, 32, 1);
    let samples: Vec<Sample> = set.iter().map(|(id, v)| Sample { id: id.clone(), input: positional_encode(&normalize(v), 10).unwrap() }).collect();
    let data = Dataset { train: samples.clone(), val: samples[..1].to_vec() };
    let model = SwanModel::<f32>::new(ModelConfig::desk()).unwrap();
    println!("params {}", model.parameter_count());
    let cfg = TrainConfig { epochs, batch_size: batch, lr, ..Default::default() };
    let t = Instant::now();
    let out = fit(model, &data, &cfg, None, &CheckpointPolicy::default(), |r| {
        println!("{} {:.1}s total {:.4} recon {:.4} levels {:?}", r.epoch, t.elapsed().as_secs_f64(), r.train_total, r.train_recon, r.train_levels);
    }).unwrap();
    let mut ious = Vec::new();
    let mut mses = Vec::new();
    for s in &data.train {
        let f = out.model.forward(&s.input, 1.0).unwrap();
        let gt = swanvox::volume::DensityVolume::new([32; 3], s.input.channel(0).to_vec(), 1.0).unwrap();
        let tau = swanvox::metrics::default_threshold(&gt);
        ious.push(swanvox::metrics::iou(&swanvox::metrics::binarize(&f.reconstruction, tau), &swanvox::metrics::binarize(&gt, tau)).unwrap());
        mses.push(swanvox::metrics::mse(&f.reconstruction, &gt).unwrap());
    }
    println!("final mse {:?}\niou {:?}", mses, ious);
    let toks: Vec<usize> = data.train.iter().flat_map(|s| out.model.forward(&s.input, 1.0).unwrap().tokens[0].concat()).collect();
    let u = swanvox::quantizer::utilization(&toks, 4096).unwrap();
    println!("perplexity {} dead {}", u.perplexity, u.dead_fraction);
}
