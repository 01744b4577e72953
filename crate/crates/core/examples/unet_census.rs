//! Structure of the full-size and desk networks.

use fedsct::model::{UNet, UNetConfig};
use fedsct::nn::Mode;
use fedsct::tensor::Tensor;

fn main() -> fedsct::Result<()> {
    for (name, cfg) in [("paper", UNetConfig::paper()), ("desk", UNetConfig::desk()), ("tiny", UNetConfig::tiny(64))] {
        let mut net = UNet::<f32>::new(cfg.clone(), 0)?;
        let params = net.flatten();
        let y = net.forward(&Tensor::zeros(&[1, 1, cfg.input_size, cfg.input_size]), Mode::Eval)?;
        println!(
            "{name}: {} convolutions, {} tensors, {} values, output {:?}",
            net.conv_count(),
            params.len(),
            params.numel(),
            y.shape()
        );
    }
    for c in UNet::<f32>::new(UNetConfig::paper(), 0)?.conv_census() {
        println!("  {c:?}");
    }
    Ok(())
}
