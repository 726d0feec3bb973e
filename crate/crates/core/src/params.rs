//! Named trainable tensors and their optimizer state.

use std::path::Path;

use s3attn_numerics::kernels::Mode;
use s3attn_numerics::{
    adam_step, grad_check, io, AdamConfig, AdamState, GradCheckReport, Graph, NumericsError, Probe, RngState, Tensor,
    Var,
};

use crate::error::{param_err, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|t| t.shape().to_vec()))
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(self.values.iter()).collect();
        Ok(io::save_named(path, &entries)?)
    }

    /// Loads values saved from a store with identical names and shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = io::load_named(path)?;
        if loaded.len() != self.values.len() {
            return Err(param_err(
                "load_checkpoint",
                format!("{} entries, expected {}", loaded.len(), self.values.len()),
            ));
        }
        for (i, (name, t)) in loaded.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(param_err(
                    "load_checkpoint",
                    format!(
                        "entry {i} is {name} {:?}, expected {} {:?}",
                        t.shape(),
                        self.names[i],
                        self.values[i].shape()
                    ),
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: Vec<Var>,
    pub mode: Mode,
    pub rng: &'a mut RngState,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &ParamStore, mode: Mode, rng: &'a mut RngState) -> Self {
        let vars = store.bind(g);
        Self { g, vars, mode, rng }
    }

    /// Context over parameters already placed on `g`, in store order.
    pub fn from_vars(g: &'a mut Graph, vars: Vec<Var>, mode: Mode, rng: &'a mut RngState) -> Self {
        Self { g, vars, mode, rng }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Finite-difference check of a scalar loss over every parameter in
/// `store` plus `inputs`. `f` receives a context bound to the perturbed
/// parameters and the input vars; each evaluation gets a fresh RNG seeded
/// with `seed` so stochastic layers draw identical masks.
pub fn grad_check_model<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    seed: u64,
    h: f64,
    probe: Probe,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let count = store.len();
    let mut all: Vec<Tensor> = store.values.clone();
    all.extend(inputs.iter().cloned());
    let report = grad_check(
        |g: &mut Graph, vars: &[Var]| {
            let mut rng = RngState::new(seed);
            let mut ctx = Ctx::from_vars(g, vars[..count].to_vec(), mode, &mut rng);
            f(&mut ctx, &vars[count..]).map_err(|e| match e {
                CoreError::Numerics(inner) => inner,
                other => NumericsError::Param {
                    op: "grad_check_model",
                    msg: other.to_string(),
                },
            })
        },
        &all,
        h,
        probe,
    )?;
    Ok(report)
}

/// Adam over a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            states: store.values.iter().map(|t| AdamState::new(t.numel())).collect(),
        }
    }

    /// Applies one update from the gradients `g` holds for `vars`.
    /// Parameters without a gradient (unused in the forward pass) are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, vars: &[Var]) -> Result<()> {
        for (i, &v) in vars.iter().enumerate() {
            if let Some(grad) = g.grad(v) {
                adam_step(&mut store.values[i], grad, &mut self.states[i], &self.config)?;
            }
        }
        Ok(())
    }
}

/// Uniform `[-bound, bound]` initializer.
pub fn uniform_init(shape: &[usize], bound: f64, rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(&[2, 3], |i| i as f64));
        store.add("b", Tensor::ones(&[3]));
        store.save(&path).unwrap();
        let mut other = store.clone();
        *other.get_mut(ParamId(0)) = Tensor::zeros(&[2, 3]);
        other.load(&path).unwrap();
        assert_eq!(other.get(ParamId(0)), store.get(ParamId(0)));
        let mut wrong = ParamStore::new();
        wrong.add("w", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::zeros(&[3]));
        assert!(wrong.load(&path).is_err());
    }
}
