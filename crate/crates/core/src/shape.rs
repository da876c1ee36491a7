use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Tensor dimensions. Convolutional tensors are `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

pub const MAX_ORDER: usize = 4;

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Shape, String> {
        if dims.is_empty() || dims.len() > MAX_ORDER {
            return Err(format!("shape order must be in 1..={MAX_ORDER}, got {}", dims.len()));
        }
        if dims.contains(&0) {
            return Err(format!("shape {dims:?} has a zero dimension"));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = String;

    fn try_from(dims: Vec<usize>) -> Result<Self, Self::Error> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Parses `H,W,C` or `D`.
impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        Shape::new(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn parse(s: &str) -> Option<Padding> {
        match s {
            "SAME" => Some(Padding::Same),
            "VALID" => Some(Padding::Valid),
            _ => None,
        }
    }
}

/// Output extent of a sliding window along one spatial axis, or `None` when
/// a VALID window does not fit.
pub fn window_out(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
    }
}

/// Element-wise maximum, used when a residual skip and body are merged.
pub fn merge_max(a: &Shape, b: &Shape) -> Option<Shape> {
    (a.order() == b.order()).then(|| Shape(a.0.iter().zip(&b.0).map(|(x, y)| *x.max(y)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// SAME pads the high end so that every stride-aligned start inside the
    /// input hosts a window.
    fn brute_force_same(input: usize, stride: usize) -> usize {
        let mut n = 0;
        let mut start = 0;
        while start < input {
            n += 1;
            start += stride;
        }
        n
    }

    fn brute_force_valid(input: usize, kernel: usize, stride: usize) -> usize {
        let mut n = 0;
        let mut start = 0;
        while start + kernel <= input {
            n += 1;
            start += stride;
        }
        n
    }

    #[test]
    fn same_rule_matches_sliding_window() {
        for input in 1..=64 {
            for stride in 1..=3 {
                for kernel in [1, 3, 5] {
                    assert_eq!(
                        window_out(input, kernel, stride, Padding::Same),
                        Some(brute_force_same(input, stride)),
                        "in={input} s={stride}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn valid_rule_matches_sliding_window(input in 1usize..80, kernel in 1usize..9, stride in 1usize..4) {
            let expected = brute_force_valid(input, kernel, stride);
            let got = window_out(input, kernel, stride, Padding::Valid);
            if expected == 0 {
                prop_assert_eq!(got, None);
            } else {
                prop_assert_eq!(got, Some(expected));
            }
        }
    }

    #[test]
    fn parse_and_validate() {
        assert_eq!("32,32,3".parse::<Shape>().unwrap().dims(), &[32, 32, 3]);
        assert_eq!("784".parse::<Shape>().unwrap().dims(), &[784]);
        assert!("0,3".parse::<Shape>().is_err());
        assert!("1,1,1,1,1".parse::<Shape>().is_err());
        assert!(serde_json::from_str::<Shape>("[]").is_err());
    }

    #[test]
    fn merge() {
        let a = Shape::new(vec![8, 8, 3]).unwrap();
        let b = Shape::new(vec![4, 4, 16]).unwrap();
        assert_eq!(merge_max(&a, &b).unwrap().dims(), &[8, 8, 16]);
        assert!(merge_max(&a, &Shape::new(vec![10]).unwrap()).is_none());
    }
}
