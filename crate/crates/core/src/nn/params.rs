use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Registry of every trainable array, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param {name}");
        assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        self.params.push(Param { name, shape, value });
        ParamId(self.params.len() - 1)
    }

    /// He-normal weight with `fan_in` inputs.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.add(name, shape, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f32) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { bufs: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.bufs[id.0]
    }

    pub fn bufs(&self) -> &[Vec<f32>] {
        &self.bufs
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}
