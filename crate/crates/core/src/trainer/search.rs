//! Grid search over hyperparameters with dev-accuracy selection.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::HyperParams;

/// Ordered axes `name → values`. Points are enumerated lexicographically
/// with the first axis varying slowest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: serde_json::Map<String, serde_json::Value> = self
            .axes
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let mut axes = Vec::with_capacity(map.len());
        for (k, v) in map {
            let values: Vec<f64> = serde_json::from_value(v).map_err(D::Error::custom)?;
            axes.push((k, values));
        }
        Ok(Grid { axes })
    }
}

pub type GridPoint = Vec<(String, f64)>;

impl Grid {
    /// lr {1e-4, 3e-4} × B {4, 8} × λ2 {0.1, 0.5, 1.0} × τ {0.8, 0.95}.
    pub fn desk_default() -> Self {
        Grid {
            axes: vec![
                ("lr".into(), vec![1e-4, 3e-4]),
                ("batch_size".into(), vec![4.0, 8.0]),
                ("lambda2".into(), vec![0.1, 0.5, 1.0]),
                ("tau".into(), vec![0.8, 0.95]),
            ],
        }
    }

    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.axes.is_empty() {
            return Err(Error::invalid("grid has no axes"));
        }
        if let Some((name, _)) = self.axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::invalid(format!("grid axis `{name}` is empty")));
        }
        let mut points: Vec<GridPoint> = vec![Vec::new()];
        for (name, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((name.clone(), v));
                        q
                    })
                })
                .collect();
        }
        Ok(points)
    }
}

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("grid axis `{name}` needs whole numbers, got {v}")))
    }
}

pub fn apply_point(base: &HyperParams, point: &GridPoint) -> Result<HyperParams> {
    let mut hp = base.clone();
    for (name, v) in point {
        let v = *v;
        match name.as_str() {
            "lr" => hp.lr = v,
            "batch_size" | "B" => hp.batch_size = as_count(name, v)?,
            "mu" => hp.mu = as_count(name, v)?,
            "lambda1" => hp.lambda1 = v,
            "lambda2" => hp.lambda2 = v,
            "tau" => hp.tau = v,
            "mask_ratio" => hp.mask_ratio = v,
            "dropout_rate" => hp.dropout_rate = v,
            "steps" => hp.steps = as_count(name, v)?,
            "eval_interval" => hp.eval_interval = as_count(name, v)?,
            _ => return Err(Error::invalid(format!("unknown grid axis `{name}`"))),
        }
    }
    hp.validate()?;
    Ok(hp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPointResult {
    pub point: Vec<(String, f64)>,
    pub dev_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome<T> {
    pub best_index: usize,
    pub best: HyperParams,
    pub results: Vec<GridPointResult>,
    pub best_artifact: T,
}

/// Runs `train` at every grid point; `train` returns the dev accuracy and an
/// artifact (typically the trained model). The first point with the highest
/// dev accuracy wins.
pub fn grid_search<T>(
    base: &HyperParams,
    grid: &Grid,
    mut train: impl FnMut(usize, &HyperParams) -> Result<(f64, T)>,
) -> Result<GridOutcome<T>> {
    let points = grid.points()?;
    let mut results = Vec::with_capacity(points.len());
    let mut best: Option<(usize, HyperParams, f64, T)> = None;
    for (i, point) in points.into_iter().enumerate() {
        let hp = apply_point(base, &point)?;
        let (acc, artifact) = train(i, &hp)?;
        results.push(GridPointResult { point, dev_acc: acc });
        if best.as_ref().is_none_or(|(_, _, b, _)| acc > *b) {
            best = Some((i, hp, acc, artifact));
        }
    }
    let (best_index, best, _, best_artifact) = best.expect("grid has at least one point");
    Ok(GridOutcome {
        best_index,
        best,
        results,
        best_artifact,
    })
}
