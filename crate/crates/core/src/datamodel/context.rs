use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How `(u_ini, y_ini, r)` is turned into the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContextEncoding {
    /// `[u_ini; y_ini; r]`.
    Direct,
    /// Channel-wise `[ū_ini; ȳ_ini; y_last; r_0; r_{N-1}; r̄]`.
    Compressed,
    /// `[u_ini; y_ini; r - 1_N ⊗ y_last]`.
    #[default]
    Relative,
}

impl std::str::FromStr for ContextEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "compressed" => Ok(Self::Compressed),
            "relative" => Ok(Self::Relative),
            other => Err(Error::Unknown {
                what: "context encoding",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDims {
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub horizon: usize,
}

impl ContextEncoding {
    pub fn dim(self, d: ContextDims) -> usize {
        match self {
            Self::Direct | Self::Relative => (d.m + d.p) * d.t_ini + d.p * d.horizon,
            Self::Compressed => d.m + 5 * d.p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub encoding: ContextEncoding,
    pub vector: DVector<f64>,
}

fn channel_mean(v: &DVector<f64>, width: usize) -> DVector<f64> {
    let steps = v.len() / width;
    DVector::from_fn(width, |c, _| (0..steps).map(|k| v[k * width + c]).sum::<f64>() / steps as f64)
}

pub fn make_context(
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    r: &DVector<f64>,
    dims: ContextDims,
    encoding: ContextEncoding,
) -> Result<Context> {
    let ContextDims { m, p, t_ini, horizon } = dims;
    if u_ini.len() != m * t_ini || y_ini.len() != p * t_ini || r.len() != p * horizon {
        return Err(Error::dims(format!(
            "context parts ({}, {}, {}) do not match m={m}, p={p}, T_ini={t_ini}, N={horizon}",
            u_ini.len(),
            y_ini.len(),
            r.len()
        )));
    }
    let y_last = y_ini.rows(p * (t_ini - 1), p).into_owned();
    let parts: Vec<DVector<f64>> = match encoding {
        ContextEncoding::Direct => vec![u_ini.clone(), y_ini.clone(), r.clone()],
        ContextEncoding::Relative => {
            let rel = DVector::from_fn(r.len(), |i, _| r[i] - y_last[i % p]);
            vec![u_ini.clone(), y_ini.clone(), rel]
        }
        ContextEncoding::Compressed => vec![
            channel_mean(u_ini, m),
            channel_mean(y_ini, p),
            y_last,
            r.rows(0, p).into_owned(),
            r.rows(p * (horizon - 1), p).into_owned(),
            channel_mean(r, p),
        ],
    };
    let vector = DVector::from_iterator(parts.iter().map(|v| v.len()).sum(), parts.iter().flat_map(|v| v.iter().copied()));
    debug_assert_eq!(vector.len(), encoding.dim(dims));
    Ok(Context { encoding, vector })
}
