//! Server aggregation on a one-parameter model: FedAvg, FedAvgM and FedYogi
//! over a few rounds of fixed client proposals.

use fedsct::federation::{BaseStrategy, ClientUpdate, ServerState, StrategyConfig};
use fedsct::model::{NamedParameterSet, NamedTensor};
use fedsct::nn::{LayerTag, TagKind};
use fedsct::tensor::Tensor;

fn scalar(v: f64) -> NamedParameterSet<f64> {
    NamedParameterSet::new(vec![NamedTensor {
        name: "w".into(),
        tag: LayerTag::new(TagKind::ConvWeight, 0),
        value: Tensor::from_vec(&[1], vec![v]).expect("one value"),
    }])
    .expect("unique names")
}

fn main() -> fedsct::Result<()> {
    let strategies = [
        StrategyConfig::fedavg(),
        StrategyConfig { base: BaseStrategy::fedavgm_default(), ..StrategyConfig::fedavg() },
        StrategyConfig { base: BaseStrategy::fedyogi_default(), ..StrategyConfig::fedavg() },
    ];
    for s in strategies {
        let mut server = ServerState::new(scalar(0.0), &s);
        let mut trace = Vec::new();
        for _ in 0..5 {
            let w = server.global.entries()[0].value.data()[0];
            // Two clients that each move halfway towards their own optimum.
            let updates = [
                ClientUpdate { client_id: 0, params: scalar(w + 0.5 * (1.0 - w)), n_k: 30 },
                ClientUpdate { client_id: 1, params: scalar(w + 0.5 * (3.0 - w)), n_k: 10 },
            ];
            server.aggregate(&updates, &s)?;
            trace.push(format!("{:.4}", server.global.entries()[0].value.data()[0]));
        }
        println!("{:<10} {}", s.label(), trace.join(" "));
    }
    Ok(())
}
