use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdamState, Mlp, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable network state: flat parameters and Adam moments in [`Mlp::param`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub version: u32,
    pub spec: NetworkSpec,
    pub adam_step: u64,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

fn flatten<T: Scalar>(w: &[Array2<T>], b: &[Array1<T>]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).map(|x| x.as_f64()))
        .collect()
}

fn unflatten<T: Scalar>(spec: &NetworkSpec, flat: &[f64], what: &str) -> Result<(Vec<Array2<T>>, Vec<Array1<T>>)> {
    if flat.len() != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} values, got {}",
            spec.param_count(),
            flat.len()
        )));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut pos = 0;
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let n = fan_in * fan_out;
        let wmat = Array2::from_shape_vec((fan_out, fan_in), flat[pos..pos + n].iter().map(|&x| T::lit(x)).collect())
            .expect("length checked");
        pos += n;
        let bvec = Array1::from_iter(flat[pos..pos + fan_out].iter().map(|&x| T::lit(x)));
        pos += fan_out;
        weights.push(wmat);
        biases.push(bvec);
    }
    Ok((weights, biases))
}

impl<T: Scalar> Mlp<T> {
    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            adam_step: self.adam.step,
            params: flatten(&self.weights, &self.biases),
            adam_m: flatten(&self.adam.m_w, &self.adam.m_b),
            adam_v: flatten(&self.adam.v_w, &self.adam.v_b),
        }
    }

    pub fn from_snapshot(snapshot: &MlpSnapshot) -> Result<Self> {
        if snapshot.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network version {} (expected {CHECKPOINT_VERSION})",
                snapshot.version
            )));
        }
        snapshot.spec.validate()?;
        if snapshot.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        let (weights, biases) = unflatten::<T>(&snapshot.spec, &snapshot.params, "params")?;
        let (m_w, m_b) = unflatten::<T>(&snapshot.spec, &snapshot.adam_m, "adam_m")?;
        let (v_w, v_b) = unflatten::<T>(&snapshot.spec, &snapshot.adam_v, "adam_v")?;
        Ok(Self {
            spec: snapshot.spec.clone(),
            weights,
            biases,
            adam: AdamState {
                step: snapshot.adam_step,
                m_w,
                m_b,
                v_w,
                v_b,
            },
        })
    }
}
