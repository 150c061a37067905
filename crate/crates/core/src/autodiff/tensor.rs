use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub(crate) fn add_assign(&mut self, other: &[f32]) {
        debug_assert_eq!(self.data.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += *b;
        }
    }
}

/// Interprets a feature-map shape `[C, (D,) H, W]` as channels plus a
/// three-axis spatial extent (depth 1 for 2D maps).
pub(crate) fn split_feature_shape(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((c, [1, h, w])),
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(Error::shape(format!(
            "expected a [C, H, W] or [C, D, H, W] feature map, got {shape:?}"
        ))),
    }
}

/// Inverse of [`split_feature_shape`] for a given spatial rank.
pub(crate) fn join_feature_shape(c: usize, spatial: [usize; 3], rank: usize) -> Vec<usize> {
    let mut s = vec![c];
    s.extend_from_slice(&spatial[3 - rank..]);
    s
}

/// Expands a per-axis parameter given for `rank` axes into three axes,
/// filling the missing leading (depth) axis with `fill`.
pub(crate) fn expand_axes(v: &[usize], rank: usize, fill: usize) -> Result<[usize; 3]> {
    if v.len() != rank {
        return Err(Error::shape(format!(
            "expected {rank} per-axis values, got {}",
            v.len()
        )));
    }
    let mut out = [fill; 3];
    out[3 - rank..].copy_from_slice(v);
    Ok(out)
}
