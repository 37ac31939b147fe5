//! Latent appearance codes: a structured generator over fixed condition
//! coordinates, a free per-condition table, and linear blending.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{mlp_forward, normal_tensor, Activation, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{bail_input, Result};

/// Default latent width.
pub const DEFAULT_DIM: usize = 136;

/// Hidden widths of the structured code generator.
pub const HIDDEN: [usize; 2] = [16, 68];

/// Standard deviation of free-mode initial codes.
pub const FREE_INIT_STD: f64 = 0.1;

/// The four weather and lighting conditions, in registry order.
pub const CONDITIONS: [&str; 4] = ["day", "night", "evening", "rain"];

/// Fixed plane coordinates: day, evening and night on one axis, rain on the other.
pub fn condition_coords() -> Vec<(&'static str, [f64; 2])> {
    vec![
        ("day", [-1.0, 0.0]),
        ("night", [1.0, 0.0]),
        ("evening", [0.0, 0.0]),
        ("rain", [0.0, 1.0]),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Structured,
    Free,
}

impl LatentMode {
    pub fn flag(self) -> u8 {
        match self {
            LatentMode::Structured => 0,
            LatentMode::Free => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(LatentMode::Structured),
            1 => Ok(LatentMode::Free),
            other => bail_input!("unknown latent mode flag {other}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Free(String),
    Structured([f64; 2]),
    Interpolated { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceCode {
    pub z: Vec<f64>,
    pub provenance: Provenance,
}

impl AppearanceCode {
    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// `α·a + (1−α)·b`, componentwise.
pub fn interpolate(a: &AppearanceCode, b: &AppearanceCode, alpha: f64) -> Result<AppearanceCode> {
    if a.dim() != b.dim() {
        bail_input!("cannot blend codes of dimension {} and {}", a.dim(), b.dim());
    }
    if !(0.0..=1.0).contains(&alpha) {
        bail_input!("blend weight {alpha} outside [0, 1]");
    }
    let z = a.z.iter().zip(&b.z).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
    Ok(AppearanceCode {
        z,
        provenance: Provenance::Interpolated { alpha },
    })
}

/// Named conditions, their coordinates and the code generation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionRegistry {
    pub mode: LatentMode,
    pub conditions: Vec<(String, [f64; 2])>,
}

impl ConditionRegistry {
    pub fn new(mode: LatentMode, names: &[String]) -> Result<Self> {
        let table = condition_coords();
        let mut conditions = Vec::new();
        for name in names {
            let Some((_, c)) = table.iter().find(|(n, _)| n == name) else {
                bail_input!("unknown condition {name:?}; known: {}", CONDITIONS.join(", "));
            };
            if conditions.iter().any(|(n, _): &(String, _)| n == name) {
                bail_input!("condition {name:?} listed twice");
            }
            conditions.push((name.clone(), *c));
        }
        if conditions.is_empty() {
            bail_input!("at least one condition is required");
        }
        Ok(Self { mode, conditions })
    }

    pub fn standard(mode: LatentMode) -> Self {
        let names: Vec<String> = CONDITIONS.iter().map(|s| s.to_string()).collect();
        Self::new(mode, &names).expect("built-in conditions are valid")
    }

    pub fn names(&self) -> Vec<&str> {
        self.conditions.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        match self.conditions.iter().position(|(n, _)| n == name) {
            Some(i) => Ok(i),
            None => bail_input!("unknown condition {name:?}; registered: {}", self.names().join(", ")),
        }
    }

    pub fn coord(&self, name: &str) -> Result<[f64; 2]> {
        Ok(self.conditions[self.index(name)?].1)
    }
}

/// Parameter handles for code generation.
#[derive(Clone, Debug)]
pub enum LatentParams {
    Structured { layers: Vec<(ParamId, ParamId)>, dim: usize },
    Free { table: Vec<ParamId>, dim: usize },
}

impl LatentParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, registry: &ConditionRegistry, dim: usize) -> Self {
        match registry.mode {
            LatentMode::Structured => {
                let widths = [2, HIDDEN[0], HIDDEN[1], dim];
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let std = (1.0 / w[0] as f64).sqrt();
                        let wid = store.add(format!("latent.net{i}.w"), normal_tensor(rng, &[w[0], w[1]], std));
                        let bid = store.add(format!("latent.net{i}.b"), Tensor::zeros(&[w[1]]));
                        (wid, bid)
                    })
                    .collect();
                LatentParams::Structured { layers, dim }
            }
            LatentMode::Free => {
                let table = registry
                    .conditions
                    .iter()
                    .map(|(name, _)| store.add(format!("latent.free.{name}"), normal_tensor(rng, &[1, dim], FREE_INIT_STD)))
                    .collect();
                LatentParams::Free { table, dim }
            }
        }
    }

    pub fn find<T: Real>(store: &ParamStore<T>, registry: &ConditionRegistry) -> Result<Self> {
        let get = |name: String| match store.find(&name) {
            Some(id) => Ok(id),
            None => Err(crate::Error::input(format!("parameter store has no {name}"))),
        };
        match registry.mode {
            LatentMode::Structured => {
                let layers = (0..3)
                    .map(|i| Ok((get(format!("latent.net{i}.w"))?, get(format!("latent.net{i}.b"))?)))
                    .collect::<Result<Vec<_>>>()?;
                let dim = store.get(layers[2].0).cols();
                Ok(LatentParams::Structured { layers, dim })
            }
            LatentMode::Free => {
                let table = registry
                    .conditions
                    .iter()
                    .map(|(n, _)| get(format!("latent.free.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                let dim = store.get(table[0]).cols();
                Ok(LatentParams::Free { table, dim })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LatentParams::Structured { dim, .. } | LatentParams::Free { dim, .. } => *dim,
        }
    }

    /// Records the generator on `g` for coordinate `c`.
    pub fn structured_var<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, c: [f64; 2]) -> Result<Var> {
        let LatentParams::Structured { layers, .. } = self else {
            bail_input!("coordinate codes need the structured latent mode");
        };
        let x = g.constant(Tensor::from_f64(&[1, 2], &c)?);
        let layers: Vec<(Var, Var)> = layers.iter().map(|(w, b)| (bound.var(*w), bound.var(*b))).collect();
        mlp_forward(g, x, &layers, Activation::Gelu)
    }

    /// `[1, dim]` code of a registered condition, recorded on `g`.
    pub fn code_var<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, registry: &ConditionRegistry, condition: &str) -> Result<Var> {
        let i = registry.index(condition)?;
        match self {
            LatentParams::Structured { .. } => self.structured_var(g, bound, registry.conditions[i].1),
            LatentParams::Free { table, .. } => Ok(bound.var(table[i])),
        }
    }

    /// Structured code of an arbitrary coordinate.
    pub fn code_structured<T: Real>(&self, store: &ParamStore<T>, c: [f64; 2]) -> Result<AppearanceCode> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let v = self.structured_var(&mut g, &bound, c)?;
        Ok(AppearanceCode {
            z: g.value(v).data().iter().map(|x| x.f64()).collect(),
            provenance: Provenance::Structured(c),
        })
    }

    /// Directly learned code of a condition.
    pub fn code_free<T: Real>(&self, store: &ParamStore<T>, registry: &ConditionRegistry, condition: &str) -> Result<AppearanceCode> {
        let LatentParams::Free { table, .. } = self else {
            bail_input!("table codes need the free latent mode");
        };
        let i = registry.index(condition)?;
        Ok(AppearanceCode {
            z: store.get(table[i]).data().iter().map(|x| x.f64()).collect(),
            provenance: Provenance::Free(condition.to_string()),
        })
    }

    /// Code of a registered condition in whichever mode is active.
    pub fn code<T: Real>(&self, store: &ParamStore<T>, registry: &ConditionRegistry, condition: &str) -> Result<AppearanceCode> {
        match self {
            LatentParams::Structured { .. } => self.code_structured(store, registry.coord(condition)?),
            LatentParams::Free { .. } => self.code_free(store, registry, condition),
        }
    }
}

/// Structured code at the blended coordinate `α·c_a + (1−α)·c_b`.
pub fn code_at_blended_coord<T: Real>(
    latent: &LatentParams,
    store: &ParamStore<T>,
    registry: &ConditionRegistry,
    a: &str,
    b: &str,
    alpha: f64,
) -> Result<AppearanceCode> {
    if !(0.0..=1.0).contains(&alpha) {
        bail_input!("blend weight {alpha} outside [0, 1]");
    }
    let (ca, cb) = (registry.coord(a)?, registry.coord(b)?);
    let c = [alpha * ca[0] + (1.0 - alpha) * cb[0], alpha * ca[1] + (1.0 - alpha) * cb[1]];
    latent.code_structured(store, c)
}
