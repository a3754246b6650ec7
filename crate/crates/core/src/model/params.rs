use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_tag, rng};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Embedding,
    EncoderLayers,
    DecoderLayers,
    CrossAttention,
    AuxHeads,
    Generator,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Embedding,
        Component::EncoderLayers,
        Component::DecoderLayers,
        Component::CrossAttention,
        Component::AuxHeads,
        Component::Generator,
    ];

    /// Component implied by a tensor name, or `None` for names outside the
    /// naming scheme.
    pub fn for_name(name: &str) -> Option<Component> {
        let mut parts = name.split('.');
        Some(match parts.next()? {
            "embed" if name == "embed" => Component::Embedding,
            "enc" => Component::EncoderLayers,
            "dec" => match (parts.next()?, parts.next()?) {
                ("ln", _) => Component::DecoderLayers,
                (_, "cross" | "lnx") => Component::CrossAttention,
                _ => Component::DecoderLayers,
            },
            "rtd" => Component::AuxHeads,
            "gen" => Component::Generator,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| c.to_string().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Embedding => "Embedding",
            Component::EncoderLayers => "EncoderLayers",
            Component::DecoderLayers => "DecoderLayers",
            Component::CrossAttention => "CrossAttention",
            Component::AuxHeads => "AuxHeads",
            Component::Generator => "Generator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub component: Component,
    pub value: Matrix,
    pub trainable: bool,
}

/// Named, component-tagged parameter tensors. Ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// How a fresh tensor is initialized, derived from its name.
fn init_value(name: &str, rows: usize, cols: usize, seed: u64) -> Matrix {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let mut r = rng(derive_seed(seed, &[label_tag(name)]));
    if name == "embed" {
        let n = Normal::new(0.0, (cols as f64).powf(-0.5)).expect("valid std");
        return Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut r)).collect());
    }
    match leaf {
        "g" => Matrix::filled(rows, cols, 1.0),
        l if l.starts_with('b') => Matrix::zeros(rows, cols),
        _ => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("valid bounds");
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| u.sample(&mut r)).collect())
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a freshly initialized tensor.
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> Result<usize> {
        self.insert(name, init_value(name, rows, cols, seed))
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<usize> {
        let component = Component::for_name(name)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{name}` has no component")))?;
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor `{name}`")));
        }
        self.tensors.push(Tensor { name: name.to_string(), component, value, trainable: true });
        self.index.insert(name.to_string(), self.tensors.len() - 1);
        Ok(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.tensors[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.tensors[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.tensors.iter().enumerate()
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn trainable(&self, id: usize) -> bool {
        self.tensors[id].trainable
    }

    pub fn set_trainable(&mut self, id: usize, on: bool) {
        self.tensors[id].trainable = on;
    }

    /// Marks exactly the tensors of `components` trainable.
    pub fn train_only(&mut self, components: &[Component]) {
        for t in &mut self.tensors {
            t.trainable = components.contains(&t.component);
        }
    }

    pub fn train_all(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.trainable = true);
    }

    /// Re-draws every tensor of `components` from `seed`.
    pub fn reinit(&mut self, components: &[Component], seed: u64) {
        for t in &mut self.tensors {
            if components.contains(&t.component) {
                t.value = init_value(&t.name, t.value.rows, t.value.cols, seed);
            }
        }
    }

    /// Drops every tensor of `components`; ids are renumbered.
    pub fn without(&self, components: &[Component]) -> ParamStore {
        let mut out = ParamStore::new();
        for t in &self.tensors {
            if !components.contains(&t.component) {
                out.insert(&t.name, t.value.clone()).expect("names already validated");
            }
        }
        out
    }

    /// Tensor names grouped by component. Fails if any tensor's tag
    /// disagrees with its name.
    pub fn tag_components(&self) -> Result<BTreeMap<Component, Vec<String>>> {
        let mut out: BTreeMap<Component, Vec<String>> = BTreeMap::new();
        for t in &self.tensors {
            if Component::for_name(&t.name) != Some(t.component) {
                return Err(Error::InvalidArgument(format!("tensor `{}` is mistagged", t.name)));
            }
            out.entry(t.component).or_default().push(t.name.clone());
        }
        Ok(out)
    }

    pub fn component_count(&self, c: Component) -> usize {
        self.tensors.iter().filter(|t| t.component == c).map(|t| t.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_rules() {
        assert_eq!(Component::for_name("embed"), Some(Component::Embedding));
        assert_eq!(Component::for_name("enc.0.attn.wq"), Some(Component::EncoderLayers));
        assert_eq!(Component::for_name("dec.1.self.wq"), Some(Component::DecoderLayers));
        assert_eq!(Component::for_name("dec.1.cross.wk"), Some(Component::CrossAttention));
        assert_eq!(Component::for_name("dec.0.lnx.g"), Some(Component::CrossAttention));
        assert_eq!(Component::for_name("dec.ln.g"), Some(Component::DecoderLayers));
        assert_eq!(Component::for_name("rtd.u"), Some(Component::AuxHeads));
        assert_eq!(Component::for_name("gen.in"), Some(Component::Generator));
        assert_eq!(Component::for_name("embedding"), None);
        assert_eq!(Component::for_name("xyz.w"), None);
    }

    #[test]
    fn init_rules_and_reinit() {
        let mut s = ParamStore::new();
        let g = s.init("enc.0.ln1.g", 1, 4, 1).unwrap();
        let b = s.init("enc.0.ln1.b", 1, 4, 1).unwrap();
        let w = s.init("dec.0.self.wq", 4, 4, 1).unwrap();
        assert!(s.value(g).data.iter().all(|&v| v == 1.0));
        assert!(s.value(b).data.iter().all(|&v| v == 0.0));
        let before = s.value(w).clone();
        s.reinit(&[Component::EncoderLayers], 9);
        assert_eq!(s.value(w), &before);
        s.reinit(&[Component::DecoderLayers], 9);
        assert_ne!(s.value(w), &before);
        assert!(s.insert("dec.0.self.wq", before).is_err());
    }
}
