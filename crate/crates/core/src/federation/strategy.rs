//! Server-side aggregation: FedAvg, FedAvgM and FedYogi, plus the FedBN
//! broadcast filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NamedParameterSet, NamedTensor};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaseStrategy {
    FedAvg,
    FedAvgM {
        beta: f64,
        eta_s: f64,
    },
    FedYogi {
        eta: f64,
        /// Client learning rate; the local Adam rate plays this role.
        eta_l: f64,
        beta1: f64,
        beta2: f64,
        tau: f64,
    },
}

impl BaseStrategy {
    pub fn fedavgm_default() -> Self {
        BaseStrategy::FedAvgM {
            beta: 0.3,
            eta_s: 0.2,
        }
    }

    pub fn fedyogi_default() -> Self {
        BaseStrategy::FedYogi {
            eta: 0.03,
            eta_l: 1e-4,
            beta1: 0.6,
            beta2: 0.6,
            tau: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub base: BaseStrategy,
    /// FedProx coefficient; 0 disables the proximal term.
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub fedbn: bool,
}

impl StrategyConfig {
    pub fn fedavg() -> Self {
        StrategyConfig {
            base: BaseStrategy::FedAvg,
            prox_mu: 0.0,
            fedbn: false,
        }
    }

    pub fn with_prox(mut self, mu: f64) -> Self {
        self.prox_mu = mu;
        self
    }

    pub fn with_fedbn(mut self) -> Self {
        self.fedbn = true;
        self
    }

    /// Short label such as `FedAvg+FedProx`.
    pub fn label(&self) -> String {
        let mut s = match self.base {
            BaseStrategy::FedAvg => "FedAvg".to_string(),
            BaseStrategy::FedAvgM { .. } => "FedAvgM".to_string(),
            BaseStrategy::FedYogi { .. } => "FedYogi".to_string(),
        };
        if self.prox_mu > 0.0 {
            s.push_str("+FedProx");
        }
        if self.fedbn {
            s.push_str("+FedBN");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, allow_zero: bool| {
            let ok = v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0));
            if ok {
                Ok(())
            } else {
                Err(Error::config(
                    format!("federation.strategy.{name}"),
                    format!("must be finite and {} 0, got {v}", if allow_zero { ">=" } else { ">" }),
                ))
            }
        };
        check("prox_mu", self.prox_mu, true)?;
        match self.base {
            BaseStrategy::FedAvg => {}
            BaseStrategy::FedAvgM { beta, eta_s } => {
                check("base.beta", beta, true)?;
                check("base.eta_s", eta_s, true)?;
            }
            BaseStrategy::FedYogi {
                eta,
                eta_l,
                beta1,
                beta2,
                tau,
            } => {
                check("base.eta", eta, false)?;
                check("base.eta_l", eta_l, false)?;
                check("base.beta1", beta1, true)?;
                check("base.beta2", beta2, true)?;
                check("base.tau", tau, false)?;
                for (name, b) in [("base.beta1", beta1), ("base.beta2", beta2)] {
                    if b >= 1.0 {
                        return Err(Error::config(
                            format!("federation.strategy.{name}"),
                            format!("must be < 1, got {b}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A client's trained parameters and its local sample count.
#[derive(Clone, Debug)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub params: NamedParameterSet<T>,
    pub n_k: usize,
}

/// Global model and server-optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<T> {
    pub global: NamedParameterSet<T>,
    pub momentum: NamedParameterSet<f64>,
    pub yogi_m: NamedParameterSet<f64>,
    pub yogi_v: NamedParameterSet<f64>,
    pub round_index: usize,
}

impl<T: Scalar> ServerState<T> {
    /// Fresh state: zero momentum, Yogi `m = 0`, `v = tau²`.
    pub fn new(global: NamedParameterSet<T>, strategy: &StrategyConfig) -> Self {
        let zeros = global.cast::<f64>().zeros_like();
        let tau = match strategy.base {
            BaseStrategy::FedYogi { tau, .. } => tau,
            _ => 0.0,
        };
        ServerState {
            momentum: zeros.clone(),
            yogi_m: zeros.clone(),
            yogi_v: zeros.map_values(|_| tau * tau),
            global,
            round_index: 0,
        }
    }

    /// Apply one aggregation step of `strategy` and advance the round index.
    pub fn aggregate(&mut self, updates: &[ClientUpdate<T>], strategy: &StrategyConfig) -> Result<()> {
        match strategy.base {
            BaseStrategy::FedAvg => {
                self.global = aggregate_fedavg(updates)?;
                self.round_index += 1;
            }
            BaseStrategy::FedAvgM { beta, eta_s } => aggregate_fedavgm(updates, self, beta, eta_s)?,
            BaseStrategy::FedYogi {
                eta,
                beta1,
                beta2,
                tau,
                ..
            } => aggregate_fedyogi(updates, self, eta, beta1, beta2, tau)?,
        }
        Ok(())
    }
}

/// The payload sent to clients. Under FedBN every batch-norm entry
/// (scale, shift and running statistics) is withheld.
pub fn broadcast<T: Scalar>(server: &ServerState<T>, fedbn: bool) -> NamedParameterSet<T> {
    if fedbn {
        server.global.filter(|e| !e.tag.is_batch_norm())
    } else {
        server.global.clone()
    }
}

fn sorted_updates<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<Vec<&ClientUpdate<T>>> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one update".into()));
    }
    let mut v: Vec<_> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    for w in v.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::InvalidInput(format!(
                "duplicate update from client {}",
                w[0].client_id
            )));
        }
    }
    for u in &v {
        if u.n_k == 0 {
            return Err(Error::InvalidInput(format!(
                "client {} reported zero samples",
                u.client_id
            )));
        }
        v[0].params.check_same_schema(&u.params)?;
    }
    Ok(v)
}

/// Sample-weighted mean of client parameters in f64, summed in ascending
/// client order.
fn weighted_mean_f64<T: Scalar>(updates: &[&ClientUpdate<T>]) -> Vec<Vec<f64>> {
    let n: usize = updates.iter().map(|u| u.n_k).sum();
    let weights: Vec<f64> = updates.iter().map(|u| u.n_k as f64 / n as f64).collect();
    let first = &updates[0].params;
    first
        .entries()
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            let mut acc = vec![0.0f64; entry.value.len()];
            for (u, &wk) in updates.iter().zip(&weights) {
                for (a, &v) in acc.iter_mut().zip(u.params.entries()[e].value.data()) {
                    *a += wk * v.as_f64();
                }
            }
            acc
        })
        .collect()
}

fn rebuild<T: Scalar>(like: &NamedParameterSet<T>, values: Vec<Vec<f64>>) -> NamedParameterSet<T> {
    let entries = like
        .entries()
        .iter()
        .zip(values)
        .map(|(e, v)| NamedTensor {
            name: e.name.clone(),
            tag: e.tag,
            value: Tensor::from_vec(e.value.shape(), v.into_iter().map(T::from_f64).collect())
                .expect("shape preserved"),
        })
        .collect();
    NamedParameterSet::new(entries).expect("names preserved")
}

/// `w = Σ (n_k / n) w_k`, entrywise.
pub fn aggregate_fedavg<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<NamedParameterSet<T>> {
    let sorted = sorted_updates(updates)?;
    let mean = weighted_mean_f64(&sorted);
    Ok(rebuild(&sorted[0].params, mean))
}

fn check_against_global<T: Scalar>(state: &ServerState<T>, updates: &[&ClientUpdate<T>]) -> Result<()> {
    state.global.check_same_schema(&updates[0].params)
}

/// Server momentum on the pseudo-gradient `Δ = w_t − avg`:
/// `v ← βv + Δ`, `w ← w_t − η_s v`.
///
/// Running statistics are not gradients; they take the plain weighted mean.
pub fn aggregate_fedavgm<T: Scalar>(
    updates: &[ClientUpdate<T>],
    state: &mut ServerState<T>,
    beta: f64,
    eta_s: f64,
) -> Result<()> {
    let sorted = sorted_updates(updates)?;
    check_against_global(state, &sorted)?;
    // The client mean rounded to T, exactly what plain FedAvg would publish.
    let avg = rebuild(&sorted[0].params, weighted_mean_f64(&sorted));
    let mut out = Vec::with_capacity(avg.len());
    for ((g, a), v) in state
        .global
        .entries()
        .iter()
        .zip(avg.entries())
        .zip(state.momentum.entries_mut())
    {
        if !g.tag.is_trainable() {
            out.push(a.value.data().iter().map(|x| x.as_f64()).collect());
            continue;
        }
        let mut w = Vec::with_capacity(g.value.len());
        for ((&wt, &av), vi) in g.value.data().iter().zip(a.value.data()).zip(v.value.data_mut()) {
            let (wt, av) = (wt.as_f64(), av.as_f64());
            let v_old = *vi;
            *vi = beta * v_old + (wt - av);
            // Equal to w_t − η_s v, arranged so β = 0, η_s = 1 yields the mean exactly.
            w.push((1.0 - eta_s) * wt + eta_s * av - eta_s * beta * v_old);
        }
        out.push(w);
    }
    state.global = rebuild(&state.global, out);
    state.round_index += 1;
    Ok(())
}

/// Yogi server optimizer on `Δ = avg − w_t`:
/// `m ← β₁m + (1−β₁)Δ`, `v ← v − (1−β₂)Δ² sign(v − Δ²)`,
/// `w ← w_t + η m / (√v + τ)`.
///
/// Running statistics take the plain weighted mean.
pub fn aggregate_fedyogi<T: Scalar>(
    updates: &[ClientUpdate<T>],
    state: &mut ServerState<T>,
    eta: f64,
    beta1: f64,
    beta2: f64,
    tau: f64,
) -> Result<()> {
    let sorted = sorted_updates(updates)?;
    check_against_global(state, &sorted)?;
    let avg = weighted_mean_f64(&sorted);
    let mut out = Vec::with_capacity(avg.len());
    let entries = state
        .global
        .entries()
        .iter()
        .zip(avg)
        .zip(state.yogi_m.entries_mut().iter_mut().zip(state.yogi_v.entries_mut()));
    for ((g, a), (m, v)) in entries {
        if !g.tag.is_trainable() {
            out.push(a);
            continue;
        }
        let mut w = Vec::with_capacity(a.len());
        for (((&wt, av), mi), vi) in g
            .value
            .data()
            .iter()
            .zip(a)
            .zip(m.value.data_mut())
            .zip(v.value.data_mut())
        {
            let wt = wt.as_f64();
            let d = av - wt;
            let d2 = d * d;
            *mi = beta1 * *mi + (1.0 - beta1) * d;
            *vi -= (1.0 - beta2) * d2 * sign(*vi - d2);
            w.push(wt + eta * *mi / (vi.sqrt() + tau));
        }
        out.push(w);
    }
    state.global = rebuild(&state.global, out);
    state.round_index += 1;
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerTag, TagKind};

    fn set(values: &[(TagKind, f64)]) -> NamedParameterSet<f64> {
        NamedParameterSet::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &(kind, v))| NamedTensor {
                    name: format!("p{i}"),
                    tag: LayerTag::new(kind, i as u32),
                    value: Tensor::from_vec(&[1], vec![v]).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn update(client_id: usize, v: &[(TagKind, f64)], n_k: usize) -> ClientUpdate<f64> {
        ClientUpdate {
            client_id,
            params: set(v),
            n_k,
        }
    }

    fn first(s: &NamedParameterSet<f64>) -> f64 {
        s.entries()[0].value.data()[0]
    }

    const W: TagKind = TagKind::ConvWeight;

    #[test]
    fn fedavg_weighted_closed_form() {
        let out = aggregate_fedavg(&[update(0, &[(W, 1.0)], 1), update(1, &[(W, 3.0)], 3)]).unwrap();
        assert_eq!(first(&out), 2.5);
        let out = aggregate_fedavg(&[update(0, &[(W, 1.0)], 7), update(1, &[(W, 4.0)], 7)]).unwrap();
        assert_eq!(first(&out), 2.5);
    }

    #[test]
    fn invalid_updates_are_rejected() {
        let dup = [update(1, &[(W, 1.0)], 1), update(1, &[(W, 2.0)], 1)];
        assert!(aggregate_fedavg(&dup).is_err());
        assert!(aggregate_fedavg(&[update(0, &[(W, 1.0)], 0)]).is_err());
        assert!(aggregate_fedavg::<f64>(&[]).is_err());
        let other = update(1, &[(TagKind::BnGamma, 1.0)], 1);
        assert!(matches!(
            aggregate_fedavg(&[update(0, &[(W, 1.0)], 1), other]),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn fedavgm_frozen_at_zero_server_rate() {
        let strategy = StrategyConfig {
            base: BaseStrategy::FedAvgM { beta: 0.3, eta_s: 0.0 },
            ..StrategyConfig::fedavg()
        };
        let global = set(&[(W, 0.5), (TagKind::BnRunningMean, 0.5)]);
        let mut s = ServerState::new(global, &strategy);
        for r in 0..3 {
            let u = [update(0, &[(W, r as f64), (TagKind::BnRunningMean, 2.0)], 2)];
            s.aggregate(&u, &strategy).unwrap();
            assert_eq!(first(&s.global), 0.5);
            // Running statistics are not server-optimized.
            assert_eq!(s.global.entries()[1].value.data()[0], 2.0);
        }
        assert_eq!(s.round_index, 3);
    }

    #[test]
    fn fedavgm_two_rounds_unrolled() {
        let (beta, eta) = (0.3, 0.2);
        let strategy = StrategyConfig {
            base: BaseStrategy::FedAvgM { beta, eta_s: eta },
            ..StrategyConfig::fedavg()
        };
        let mut s = ServerState::new(set(&[(W, 1.0)]), &strategy);
        // Round 1: avg 0.25; round 2: avg 0.75.
        let v1 = 1.0 - 0.25;
        let w1 = 1.0 - eta * v1;
        let v2 = beta * v1 + (w1 - 0.75);
        let w2 = w1 - eta * v2;
        s.aggregate(&[update(0, &[(W, 0.0)], 1), update(1, &[(W, 0.5)], 1)], &strategy).unwrap();
        assert!((first(&s.global) - w1).abs() < 1e-15);
        s.aggregate(&[update(0, &[(W, 0.75)], 3)], &strategy).unwrap();
        assert!((first(&s.global) - w2).abs() < 1e-15);
        assert!((first(&s.momentum) - v2).abs() < 1e-15);
    }

    #[test]
    fn fedyogi_zero_delta_keeps_weights() {
        let strategy = StrategyConfig {
            base: BaseStrategy::fedyogi_default(),
            ..StrategyConfig::fedavg()
        };
        let mut s = ServerState::new(set(&[(W, 0.7)]), &strategy);
        s.aggregate(&[update(0, &[(W, 0.7)], 4)], &strategy).unwrap();
        assert_eq!(first(&s.global), 0.7);
        assert_eq!(first(&s.yogi_v), 0.01 * 0.01);
    }

    #[test]
    fn broadcast_filters_only_under_fedbn() {
        let global = set(&[
            (W, 1.0),
            (TagKind::ConvBias, 1.0),
            (TagKind::BnGamma, 1.0),
            (TagKind::BnBeta, 1.0),
            (TagKind::BnRunningMean, 1.0),
            (TagKind::BnRunningVar, 1.0),
        ]);
        let s = ServerState::new(global.clone(), &StrategyConfig::fedavg());
        assert_eq!(broadcast(&s, false), global);
        let sent = broadcast(&s, true);
        let names: Vec<&str> = sent.names().collect();
        assert_eq!(names, ["p0", "p1"]);
        let conv_only = set(&[(W, 1.0)]);
        let s = ServerState::new(conv_only, &StrategyConfig::fedavg());
        assert_eq!(broadcast(&s, true), broadcast(&s, false));
    }

    #[test]
    fn labels_and_validation() {
        assert_eq!(StrategyConfig::fedavg().with_prox(3.0).with_fedbn().label(), "FedAvg+FedProx+FedBN");
        let bad = StrategyConfig {
            base: BaseStrategy::FedYogi {
                eta: 0.03,
                eta_l: 1e-4,
                beta1: 1.0,
                beta2: 0.6,
                tau: 0.01,
            },
            ..StrategyConfig::fedavg()
        };
        assert!(bad.validate().unwrap_err().is_config());
        assert!(StrategyConfig::fedavg().with_prox(-1.0).validate().is_err());
    }
}
