//! Independent dynamics ensemble {f_ω}: M one-hidden-layer networks mapping
//! (z, u) → z', trained separately from the main model on observed state
//! transitions. The planner penalizes actions where the members disagree.

use crate::diffcore::optim::Adam;
use crate::diffcore::{grad, ParamStore, Tape, Var};
use crate::error::{KrcError, Result};
use crate::nets::Dense;
use crate::rng::Streams;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { members: 5, hidden: 64, epochs: 120, batch: 64, lr: 1e-3 }
    }
}

/// One observed transition (z_prev, u, z_next).
#[derive(Debug, Clone)]
pub struct Transition {
    pub z_prev: Tensor,
    pub u: Tensor,
    pub z_next: Tensor,
}

#[derive(Debug, Clone)]
struct Member {
    l1: Dense,
    l2: Dense,
}

impl Member {
    fn forward_value(&self, store: &ParamStore, z: &Tensor, u: &Tensor) -> Result<Tensor> {
        let mut xin = z.data().to_vec();
        xin.extend_from_slice(u.data());
        let h = self.l1.fwd_vec_value(store, &Tensor::vector(xin))?.map(f64::tanh);
        self.l2.fwd_vec_value(store, &h)
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    stores: Vec<ParamStore>,
    members: Vec<Member>,
    pub d_z: usize,
    pub d_u: usize,
    pub trained: bool,
    pub config: EnsembleConfig,
    /// per-epoch mean member losses, recorded during training
    pub loss_curve: Vec<f64>,
}

impl Ensemble {
    pub fn init(d_z: usize, d_u: usize, config: EnsembleConfig, streams: &Streams) -> Ensemble {
        let mut stores = Vec::new();
        let mut members = Vec::new();
        for m in 0..config.members {
            let mut store = ParamStore::new();
            let mut rng = streams.stream("ensemble-init", m as u64);
            let l1 = Dense::init(&mut store, &format!("ens.{m}.l1"), d_z + d_u, config.hidden, &mut rng);
            let l2 = Dense::init(&mut store, &format!("ens.{m}.l2"), config.hidden, d_z, &mut rng);
            stores.push(store);
            members.push(Member { l1, l2 });
        }
        Ensemble { stores, members, d_z, d_u, trained: false, config, loss_curve: Vec::new() }
    }

    /// Mean member prediction plus the dimension-averaged population variance
    /// of the member outputs.
    pub fn predict(&self, z: &Tensor, u: &Tensor) -> Result<(Tensor, f64)> {
        if !self.trained {
            return Err(KrcError::State("ensemble has not been trained".to_string()));
        }
        self.predict_untrained_ok(z, u)
    }

    /// Same computation without the trained-state gate (tests, diagnostics).
    pub fn predict_untrained_ok(&self, z: &Tensor, u: &Tensor) -> Result<(Tensor, f64)> {
        let m = self.members.len();
        let mut outs = Vec::with_capacity(m);
        for (member, store) in self.members.iter().zip(&self.stores) {
            outs.push(member.forward_value(store, z, u)?);
        }
        let mut mean = Tensor::zeros(vec![self.d_z]);
        for o in &outs {
            mean = mean.add(o)?;
        }
        let mean = mean.scale(1.0 / m as f64);
        let mut var_sum = 0.0;
        for d in 0..self.d_z {
            let mu = mean.data()[d];
            let v: f64 = outs.iter().map(|o| (o.data()[d] - mu).powi(2)).sum::<f64>() / m as f64;
            var_sum += v;
        }
        Ok((mean, var_sum / self.d_z as f64))
    }

    /// Train every member on one-step prediction error, each with its own
    /// seed and shuffling order.
    pub fn train(&mut self, transitions: &[Transition], streams: &Streams) -> Result<()> {
        if transitions.is_empty() {
            return Err(KrcError::Contract("ensemble training needs observed state transitions".to_string()));
        }
        let cfg = self.config.clone();
        self.loss_curve = vec![0.0; cfg.epochs];
        for (mi, (member, store)) in self.members.iter().zip(self.stores.iter_mut()).enumerate() {
            let mut opt = Adam::new(store, cfg.lr);
            let mut order: Vec<usize> = (0..transitions.len()).collect();
            let mut shuffle_rng = streams.stream("ensemble-shuffle", mi as u64);
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut shuffle_rng);
                let mut epoch_loss = 0.0;
                let mut batches = 0.0;
                for chunk in order.chunks(cfg.batch) {
                    let params: Vec<Tensor> = store.values().to_vec();
                    let member = member.clone();
                    let batch: Vec<&Transition> = chunk.iter().map(|i| &transitions[*i]).collect();
                    let loss_val = std::cell::Cell::new(0.0);
                    let gs = grad(
                        |tape, vs| {
                            let loss = member_batch_loss(&member, tape, vs, &batch)?;
                            loss_val.set(tape.value(loss).item()?);
                            Ok(loss)
                        },
                        &params,
                    )?;
                    opt.step(store, &gs);
                    epoch_loss += loss_val.get();
                    batches += 1.0;
                }
                self.loss_curve[epoch] += epoch_loss / batches / cfg.members as f64;
            }
        }
        self.trained = true;
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    pub fn stores(&self) -> &[ParamStore] {
        &self.stores
    }

    pub fn stores_mut(&mut self) -> &mut [ParamStore] {
        &mut self.stores
    }

    /// One-step RMSE over a transition set.
    pub fn rmse(&self, transitions: &[Transition]) -> Result<f64> {
        let mut acc = 0.0;
        let mut n = 0usize;
        for tr in transitions {
            let (pred, _) = self.predict_untrained_ok(&tr.z_prev, &tr.u)?;
            for (p, t) in pred.data().iter().zip(tr.z_next.data()) {
                acc += (p - t) * (p - t);
                n += 1;
            }
        }
        Ok((acc / n as f64).sqrt())
    }
}

fn member_batch_loss(member: &Member, tape: &mut Tape, vs: &[Var], batch: &[&Transition]) -> Result<Var> {
    use crate::diffcore::Binding;
    let binding = Binding::from_vars(vs.to_vec());
    // rows = inputs, matching the store layout produced by Dense::init
    let d_in = batch[0].z_prev.len() + batch[0].u.len();
    let mut xin = Vec::with_capacity(batch.len() * d_in);
    let mut tgt = Vec::with_capacity(batch.len() * batch[0].z_next.len());
    for tr in batch {
        xin.extend_from_slice(tr.z_prev.data());
        xin.extend_from_slice(tr.u.data());
        tgt.extend_from_slice(tr.z_next.data());
    }
    let x = tape.leaf(Tensor::from_vec(vec![batch.len(), d_in], xin)?);
    let t = tape.leaf(Tensor::from_vec(vec![batch.len(), batch[0].z_next.len()], tgt)?);
    let h = member.l1.fwd_mat(tape, &binding, x)?;
    let h = tape.tanh(h)?;
    let o = member.l2.fwd_mat(tape, &binding, h)?;
    let d = tape.sub(o, t)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear_transitions(n: usize, seed: u64) -> Vec<Transition> {
        // z' = 0.9 z + 0.1 u, 1-D, noiseless
        let streams = Streams::new(seed);
        let mut rng = streams.stream("data", 0);
        (0..n)
            .map(|_| {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let u: f64 = rng.gen_range(-1.0..1.0);
                Transition {
                    z_prev: Tensor::vector(vec![z]),
                    u: Tensor::vector(vec![u]),
                    z_next: Tensor::vector(vec![0.9 * z + 0.1 * u]),
                }
            })
            .collect()
    }

    #[test]
    fn learns_noiseless_linear_system() {
        let streams = Streams::new(17);
        let cfg = EnsembleConfig { members: 2, hidden: 32, epochs: 200, batch: 32, lr: 3e-3 };
        let mut ens = Ensemble::init(1, 1, cfg, &streams);
        let data = linear_transitions(200, 4);
        ens.train(&data, &streams).unwrap();
        let rmse = ens.rmse(&data).unwrap();
        assert!(rmse < 1e-2, "rmse {rmse}");
        assert!(ens.loss_curve.last().unwrap() < &ens.loss_curve[0], "loss did not decrease");
    }

    #[test]
    fn untrained_predict_is_a_state_error() {
        let streams = Streams::new(1);
        let ens = Ensemble::init(2, 1, EnsembleConfig::default(), &streams);
        let z = Tensor::vector(vec![0.0, 0.0]);
        let u = Tensor::vector(vec![0.0]);
        assert!(matches!(ens.predict(&z, &u), Err(KrcError::State(_))));
    }

    #[test]
    fn single_member_has_zero_variance() {
        let streams = Streams::new(2);
        let cfg = EnsembleConfig { members: 1, ..Default::default() };
        let ens = Ensemble::init(2, 1, cfg, &streams);
        let (_m, v) = ens.predict_untrained_ok(&Tensor::vector(vec![0.1, 0.2]), &Tensor::vector(vec![0.5])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn identical_members_have_negligible_variance() {
        let streams = Streams::new(3);
        let cfg = EnsembleConfig { members: 3, ..Default::default() };
        let mut ens = Ensemble::init(2, 1, cfg, &streams);
        let proto = ens.stores[0].clone();
        for s in ens.stores_mut() {
            for (dst, src) in s.values_mut().iter_mut().zip(proto.values()) {
                *dst = src.clone();
            }
        }
        let (_m, v) = ens.predict_untrained_ok(&Tensor::vector(vec![0.4, -0.1]), &Tensor::vector(vec![0.2])).unwrap();
        assert!(v < 1e-15);
    }

    #[test]
    fn forced_constant_outputs_give_population_variance() {
        // members clamped to constants 1, 2, 3 in 1-D: population variance 2/3
        let streams = Streams::new(4);
        let cfg = EnsembleConfig { members: 3, hidden: 4, ..Default::default() };
        let mut ens = Ensemble::init(1, 1, cfg, &streams);
        for (i, s) in ens.stores_mut().iter_mut().enumerate() {
            for (name, v) in [("l1.w", 0.0), ("l1.b", 0.0), ("l2.w", 0.0), ("l2.b", (i + 1) as f64)] {
                let id = s.id_by_name(&format!("ens.{i}.{name}")).unwrap();
                let t = Tensor::filled(s.value(id).shape().to_vec(), v);
                *s.value_mut(id) = t;
            }
        }
        let (mean, v) = ens.predict_untrained_ok(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert!((mean.data()[0] - 2.0).abs() < 1e-12);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn member_gradients_pass_fd() {
        let streams = Streams::new(5);
        let cfg = EnsembleConfig { members: 1, hidden: 8, ..Default::default() };
        let ens = Ensemble::init(2, 1, cfg, &streams);
        let data = vec![Transition {
            z_prev: Tensor::vector(vec![0.3, -0.4]),
            u: Tensor::vector(vec![0.7]),
            z_next: Tensor::vector(vec![0.1, 0.2]),
        }];
        let member = ens.members[0].clone();
        let params: Vec<Tensor> = ens.stores[0].values().to_vec();
        let err = crate::diffcore::grad_check(
            |tape, vs| {
                let batch: Vec<&Transition> = data.iter().collect();
                member_batch_loss(&member, tape, vs, &batch)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "ensemble gradient error {err:.3e}");
    }
}
