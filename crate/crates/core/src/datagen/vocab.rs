use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
/// First id that is an ordinary token.
pub const FIRST_CONTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_CONTENT {
            return Err(Error::invalid(format!(
                "vocabulary of {size} leaves no room beyond the {FIRST_CONTENT} special ids"
            )));
        }
        Ok(Vocabulary { size })
    }

    pub fn content(&self) -> std::ops::Range<usize> {
        FIRST_CONTENT..self.size
    }

    pub fn n_content(&self) -> usize {
        self.size - FIRST_CONTENT
    }

    pub fn is_special(id: usize) -> bool {
        id < FIRST_CONTENT
    }
}
