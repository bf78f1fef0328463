//! One forward pass through the network, printing every intermediate shape.

use mcinet::backbone::image_input;
use mcinet::config::ModelConfig;
use mcinet::{generate_episode, MciNet, Session};

fn main() -> mcinet::Result<()> {
    let cfg = ModelConfig::default();
    let (model, store) = MciNet::new(&cfg, 0)?;
    println!("{} parameters", store.num_scalars());
    let ep = generate_episode(3, 1, 11, model.input_size())?;

    let mut s = Session::new(&store);
    let x = image_input(&mut s, &ep.query.image)?;
    let pyramid = model.backbone.extract_pyramid(&mut s, x)?;
    for (i, scale) in pyramid.scales.iter().enumerate() {
        let shapes: Vec<_> = scale.layers.iter().map(|&v| s.g.value(v).shape().to_vec()).collect();
        println!("scale {}: {:?}", i, shapes);
    }

    let mut s = Session::new(&store);
    let out = model.forward(&mut s, &ep.support_images(), &ep.support_masks(), &ep.query.image)?;
    println!("evidence (penultimate) {:?}", s.g.value(out.evidence.penultimate).shape());
    println!("evidence (last)        {:?}", s.g.value(out.evidence.last).shape());
    for (q, sp) in out.skips.query.iter().zip(&out.skips.support) {
        println!("skip query {:?} support {:?}", s.g.value(*q).shape(), s.g.value(*sp).shape());
    }
    println!("small logits {:?}", s.g.value(out.small_logits).shape());
    println!("large logits {:?}", s.g.value(out.large_logits).shape());
    Ok(())
}
