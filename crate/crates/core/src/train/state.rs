use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossRecord, TrainError};
use crate::autograd::{read_checkpoint, write_checkpoint, AdamWConfig, OptimState, ParamStore, Tensor};
use crate::net::ModelParams;

pub const MODEL_FILE: &str = "model.ckpt";
const M_FILE: &str = "adam_m.ckpt";
const V_FILE: &str = "adam_v.ckpt";
const STATE_FILE: &str = "train_state.json";

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub optim: OptimState<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateJson {
    step: usize,
    adam_step: u64,
    adamw: AdamWConfig,
    history: Vec<LossRecord>,
}

fn to_store(map: &BTreeMap<String, Tensor<f32>>) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (k, v) in map {
        s.insert(k.clone(), v.clone());
    }
    s
}

fn from_store(store: ParamStore<f32>) -> BTreeMap<String, Tensor<f32>> {
    store.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Writes the model, optimizer moments and progress into `dir`.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    state.model.save(&dir.join(MODEL_FILE))?;
    write_checkpoint(&dir.join(M_FILE), &to_store(&state.optim.m)).map_err(|e| TrainError::State(e.to_string()))?;
    write_checkpoint(&dir.join(V_FILE), &to_store(&state.optim.v)).map_err(|e| TrainError::State(e.to_string()))?;
    let json = StateJson {
        step: state.step,
        adam_step: state.optim.step,
        adamw: state.optim.config,
        history: state.history.clone(),
    };
    let text = serde_json::to_string(&json).map_err(|e| TrainError::State(e.to_string()))?;
    fs::write(dir.join(STATE_FILE), text)?;
    Ok(())
}

/// Reads a state written by [`save_state`].
pub fn load_state(dir: &Path) -> Result<TrainState, TrainError> {
    let model = ModelParams::load(&dir.join(MODEL_FILE))?;
    let text = fs::read_to_string(dir.join(STATE_FILE))?;
    let json: StateJson = serde_json::from_str(&text).map_err(|e| TrainError::State(e.to_string()))?;
    let m = from_store(read_checkpoint(&dir.join(M_FILE)).map_err(|e| TrainError::State(e.to_string()))?);
    let v = from_store(read_checkpoint(&dir.join(V_FILE)).map_err(|e| TrainError::State(e.to_string()))?);
    for (name, t) in m.iter().chain(v.iter()) {
        match model.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(TrainError::State(format!("optimizer moment {name} does not match the model"))),
        }
    }
    if json.history.len() != json.step {
        return Err(TrainError::State(format!("history has {} rows for step {}", json.history.len(), json.step)));
    }
    let mut optim = OptimState::new(json.adamw);
    optim.step = json.adam_step;
    optim.m = m;
    optim.v = v;
    Ok(TrainState { model, optim, step: json.step, history: json.history })
}
