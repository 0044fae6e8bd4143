//! Named f32 tensors, their flat parameter layout, and elementwise arithmetic
//! over flattened weights.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} values, got {actual}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}`: zero-sized dimension in shape {shape:?}")]
    ZeroDimension { name: String, shape: Vec<usize> },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("vector length {actual} does not match schema dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// One row-major f32 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::checked(String::new(), shape, data)
    }

    fn checked(name: String, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension { name, shape });
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A checkpoint: tensors keyed by name, iterated in lexicographic order, plus
/// free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rejecting empty or duplicate names.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if name.is_empty() {
            return Err(TensorError::EmptyName);
        }
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let tensor = Tensor::checked(name.clone(), shape, data)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat layout of a checkpoint: tensors laid out contiguously in name order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSchema {
    slots: Vec<Slot>,
    total_dim: usize,
}

impl ParamSchema {
    /// Builds a schema from `(name, shape)` pairs. Slots are sorted by name.
    pub fn new<I, S>(entries: I) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut named: Vec<(String, Vec<usize>)> =
            entries.into_iter().map(|(n, s)| (n.into(), s)).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let mut slots = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (i, (name, shape)) in named.into_iter().enumerate() {
            if name.is_empty() {
                return Err(TensorError::EmptyName);
            }
            if i > 0 && slots.last().map(|s: &Slot| &s.name) == Some(&name) {
                return Err(TensorError::DuplicateName(name));
            }
            if shape.contains(&0) {
                return Err(TensorError::ZeroDimension { name, shape });
            }
            let len = numel(&shape);
            slots.push(Slot {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        }
        Ok(Self {
            slots,
            total_dim: offset,
        })
    }

    pub fn from_map(map: &TensorMap) -> Self {
        let mut slots = Vec::with_capacity(map.len());
        let mut offset = 0;
        for (name, t) in map.iter() {
            slots.push(Slot {
                name: name.into(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        Self {
            slots,
            total_dim: offset,
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots
            .binary_search_by(|s| s.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.slots[i])
    }

    /// Total flattened dimension `d`.
    pub fn dim(&self) -> usize {
        self.total_dim
    }
}

/// A checkpoint flattened under a shared schema.
#[derive(Clone)]
pub struct FlatVector {
    schema: Arc<ParamSchema>,
    values: Vec<f32>,
}

impl fmt::Debug for FlatVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlatVector")
            .field("dim", &self.values.len())
            .field("slots", &self.schema.slots.len())
            .finish()
    }
}

/// Bitwise equality of values under an identical schema.
impl PartialEq for FlatVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_schema(other) && self.bits_eq(other)
    }
}

impl FlatVector {
    pub fn new(schema: Arc<ParamSchema>, values: Vec<f32>) -> Result<Self, TensorError> {
        if values.len() != schema.dim() {
            return Err(TensorError::DimensionMismatch {
                expected: schema.dim(),
                actual: values.len(),
            });
        }
        Ok(Self { schema, values })
    }

    pub fn zeros(schema: Arc<ParamSchema>) -> Self {
        let values = alloc::vec![0.0; schema.dim()];
        Self { schema, values }
    }

    pub fn schema(&self) -> &Arc<ParamSchema> {
        &self.schema
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.schema.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn same_schema(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.schema, &other.schema) || *self.schema == *other.schema
    }

    pub fn ensure_same_schema(&self, other: &Self) -> Result<(), TensorError> {
        if self.same_schema(other) {
            Ok(())
        } else {
            Err(TensorError::SchemaMismatch(String::from(
                "vectors were flattened under different schemas",
            )))
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Same schema, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(self.schema.clone(), values)
    }

    /// Same schema, values produced by `f(j)` for every coordinate.
    pub fn from_fn(schema: Arc<ParamSchema>, f: impl FnMut(usize) -> f32) -> Self {
        let values = (0..schema.dim()).map(f).collect();
        Self { schema, values }
    }

    /// Splits the vector back into named tensors.
    pub fn unflatten(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for slot in &self.schema.slots {
            let data = self.values[slot.range()].to_vec();
            map.tensors.insert(
                slot.name.clone(),
                Tensor {
                    shape: slot.shape.clone(),
                    data,
                },
            );
        }
        map
    }
}

/// Concatenates the tensors of `map` in schema order.
pub fn flatten(map: &TensorMap, schema: &Arc<ParamSchema>) -> Result<FlatVector, TensorError> {
    if map.len() != schema.slots.len() {
        let extra: Vec<&str> = map.names().filter(|n| schema.slot(n).is_none()).collect();
        return Err(TensorError::SchemaMismatch(alloc::format!(
            "map has {} tensors, schema has {} (unexpected: {:?})",
            map.len(),
            schema.slots.len(),
            extra
        )));
    }
    let mut values = Vec::with_capacity(schema.dim());
    for slot in &schema.slots {
        let t = map.get(&slot.name).ok_or_else(|| {
            TensorError::SchemaMismatch(alloc::format!("missing tensor `{}`", slot.name))
        })?;
        if t.shape() != slot.shape.as_slice() {
            return Err(TensorError::SchemaMismatch(alloc::format!(
                "tensor `{}` has shape {:?}, schema expects {:?}",
                slot.name,
                t.shape(),
                slot.shape
            )));
        }
        values.extend_from_slice(t.data());
    }
    Ok(FlatVector {
        schema: schema.clone(),
        values,
    })
}

/// `a * x + y` per element with a single rounding (fused multiply-add).
pub fn axpy(a: f32, x: &FlatVector, y: &FlatVector) -> Result<FlatVector, TensorError> {
    x.ensure_same_schema(y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xi, &yi)| libm::fmaf(a, xi, yi))
        .collect();
    Ok(FlatVector {
        schema: y.schema.clone(),
        values,
    })
}

/// `x - y` per element.
pub fn sub(x: &FlatVector, y: &FlatVector) -> Result<FlatVector, TensorError> {
    x.ensure_same_schema(y)?;
    let values = x.values.iter().zip(&y.values).map(|(a, b)| a - b).collect();
    Ok(FlatVector {
        schema: x.schema.clone(),
        values,
    })
}

/// Checks that every vector shares the schema of the first.
pub fn ensure_shared_schema<'a, I>(vectors: I) -> Result<(), TensorError>
where
    I: IntoIterator<Item = &'a FlatVector>,
{
    let mut it = vectors.into_iter();
    if let Some(first) = it.next() {
        for v in it {
            first.ensure_same_schema(v)?;
        }
    }
    Ok(())
}
