//! Ground-truth label maps: `0..K` are ID classes, 254 is OOD, 255 is ignore.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OOD_LABEL: u8 = 254;
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelTruth {
    Id,
    Ood,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    tensor: Tensor<u8>,
}

impl LabelMap {
    pub fn new(tensor: Tensor<u8>) -> Result<Self> {
        tensor.expect_rank(2, "label map")?;
        Ok(Self { tensor })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(Tensor::new(vec![height, width], data)?)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tensor.shape()[0], self.tensor.shape()[1])
    }

    pub fn data(&self) -> &[u8] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor<u8> {
        &self.tensor
    }

    pub fn truth(&self, i: usize) -> PixelTruth {
        classify(self.tensor.data()[i])
    }

    /// Every code must be an ID class below `class_count`, OOD, or ignore.
    pub fn check_codes(&self, class_count: usize) -> Result<()> {
        if let Some((i, &v)) = self
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| (v as usize) >= class_count && v != OOD_LABEL && v != IGNORE_LABEL)
        {
            return Err(Error::Validation(format!(
                "label[{i}] = {v} is neither a class below {class_count} nor 254/255"
            )));
        }
        Ok(())
    }
}

pub fn classify(code: u8) -> PixelTruth {
    match code {
        OOD_LABEL => PixelTruth::Ood,
        IGNORE_LABEL => PixelTruth::Ignore,
        _ => PixelTruth::Id,
    }
}
