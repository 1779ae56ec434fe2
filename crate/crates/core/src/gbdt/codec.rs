//! Canonical JSON model files.
//!
//! Object keys are emitted in sorted order and every real is written with
//! 17 significant digits (`{:.16e}`), so encoding is a pure function of
//! the ensemble and decode/encode reproduces the input bytes.

use std::str::FromStr;

use serde_json::{Map, Number, Value};

use super::{GbdtConfig, GbdtError, Tree, TreeEnsemble, TreeNode, ENSEMBLE_FORMAT_VERSION};
use crate::data::TaskKind;

pub(crate) fn real(v: f64) -> Value {
    debug_assert!(v.is_finite());
    Value::Number(Number::from_str(&format!("{v:.16e}")).expect("finite float renders as number"))
}

fn decode_err(msg: impl Into<String>) -> GbdtError {
    GbdtError::Decode(msg.into())
}

pub(crate) fn get<'a>(obj: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value, GbdtError> {
    obj.get(key).ok_or_else(|| decode_err(format!("{ctx}: missing field `{key}`")))
}

pub(crate) fn get_f64(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<f64, GbdtError> {
    get(obj, key, ctx)?
        .as_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| decode_err(format!("{ctx}: `{key}` is not a finite number")))
}

pub(crate) fn get_u64(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<u64, GbdtError> {
    get(obj, key, ctx)?
        .as_u64()
        .ok_or_else(|| decode_err(format!("{ctx}: `{key}` is not a non-negative integer")))
}

pub(crate) fn get_obj<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    ctx: &str,
) -> Result<&'a Map<String, Value>, GbdtError> {
    get(obj, key, ctx)?
        .as_object()
        .ok_or_else(|| decode_err(format!("{ctx}: `{key}` is not an object")))
}

pub(crate) fn get_task(obj: &Map<String, Value>, ctx: &str) -> Result<TaskKind, GbdtError> {
    let s = get(obj, "task", ctx)?
        .as_str()
        .ok_or_else(|| decode_err(format!("{ctx}: `task` is not a string")))?;
    TaskKind::from_str(s).map_err(|e| decode_err(format!("{ctx}: {e}")))
}

fn node_to_json(node: &TreeNode) -> Value {
    let mut m = Map::new();
    match node {
        TreeNode::Leaf { weight } => {
            m.insert("weight".into(), real(*weight));
        }
        TreeNode::Split { feature, threshold, left, right } => {
            m.insert("feature".into(), Value::from(*feature));
            m.insert("threshold".into(), real(*threshold));
            m.insert("left".into(), node_to_json(left));
            m.insert("right".into(), node_to_json(right));
        }
    }
    Value::Object(m)
}

fn node_from_json(v: &Value) -> Result<TreeNode, GbdtError> {
    let obj = v.as_object().ok_or_else(|| decode_err("tree node is not an object"))?;
    if obj.contains_key("weight") {
        if obj.len() != 1 {
            return Err(decode_err("leaf node carries extra fields"));
        }
        return Ok(TreeNode::Leaf { weight: get_f64(obj, "weight", "leaf")? });
    }
    let feature = get_u64(obj, "feature", "split")?;
    if feature == 0 || feature > u32::MAX as u64 {
        return Err(decode_err(format!("split: feature index {feature} out of range")));
    }
    Ok(TreeNode::Split {
        feature: feature as u32,
        threshold: get_f64(obj, "threshold", "split")?,
        left: Box::new(node_from_json(get(obj, "left", "split")?)?),
        right: Box::new(node_from_json(get(obj, "right", "split")?)?),
    })
}

fn config_to_json(c: &GbdtConfig) -> Value {
    let mut m = Map::new();
    m.insert("base_score".into(), real(c.base_score));
    m.insert("eta".into(), real(c.eta));
    m.insert("gamma".into(), real(c.gamma));
    m.insert("lambda".into(), real(c.lambda));
    m.insert("max_depth".into(), Value::from(c.max_depth as u64));
    m.insert("min_child_weight".into(), real(c.min_child_weight));
    m.insert("num_trees".into(), Value::from(c.num_trees as u64));
    Value::Object(m)
}

fn config_from_json(obj: &Map<String, Value>) -> Result<GbdtConfig, GbdtError> {
    let ctx = "config";
    Ok(GbdtConfig {
        num_trees: get_u64(obj, "num_trees", ctx)? as usize,
        max_depth: get_u64(obj, "max_depth", ctx)? as usize,
        eta: get_f64(obj, "eta", ctx)?,
        lambda: get_f64(obj, "lambda", ctx)?,
        gamma: get_f64(obj, "gamma", ctx)?,
        min_child_weight: get_f64(obj, "min_child_weight", ctx)?,
        base_score: get_f64(obj, "base_score", ctx)?,
    })
}

/// Structured form of an ensemble model file.
pub fn ensemble_to_json(e: &TreeEnsemble) -> Value {
    let trees = e
        .trees()
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("leaf_count".into(), Value::from(t.leaf_count() as u64));
            m.insert("root".into(), node_to_json(t.root()));
            Value::Object(m)
        })
        .collect();
    let mut m = Map::new();
    m.insert("config".into(), config_to_json(e.config()));
    m.insert("format_version".into(), Value::from(ENSEMBLE_FORMAT_VERSION));
    m.insert("task".into(), Value::from(e.task().as_str()));
    m.insert("trees".into(), Value::Array(trees));
    Value::Object(m)
}

pub fn ensemble_from_json(v: &Value) -> Result<TreeEnsemble, GbdtError> {
    let obj = v.as_object().ok_or_else(|| decode_err("ensemble is not an object"))?;
    let ctx = "ensemble";
    let version = get_u64(obj, "format_version", ctx)?;
    if version != ENSEMBLE_FORMAT_VERSION as u64 {
        return Err(decode_err(format!("unsupported format_version {version}")));
    }
    let task = get_task(obj, ctx)?;
    let config = config_from_json(get_obj(obj, "config", ctx)?)?;
    let trees_v = get(obj, "trees", ctx)?
        .as_array()
        .ok_or_else(|| decode_err("ensemble: `trees` is not an array"))?;
    let mut trees = Vec::with_capacity(trees_v.len());
    for (i, tv) in trees_v.iter().enumerate() {
        let to = tv.as_object().ok_or_else(|| decode_err(format!("tree {i} is not an object")))?;
        let tree = Tree::new(node_from_json(get(to, "root", "tree")?)?);
        if get_u64(to, "leaf_count", "tree")? != tree.leaf_count() as u64 {
            return Err(decode_err(format!("tree {i}: leaf_count does not match its nodes")));
        }
        trees.push(tree);
    }
    TreeEnsemble::new(trees, config, task).map_err(|e| decode_err(e.to_string()))
}

pub fn serialize_ensemble(e: &TreeEnsemble) -> Vec<u8> {
    serde_json::to_vec(&ensemble_to_json(e)).expect("json values always serialize")
}

pub fn deserialize_ensemble(bytes: &[u8]) -> Result<TreeEnsemble, GbdtError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| decode_err(e.to_string()))?;
    ensemble_from_json(&v)
}
