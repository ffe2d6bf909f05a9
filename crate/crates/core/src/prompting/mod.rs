//! Point prompt generation: regular grids and superpixel centers.

mod lab;
mod slic;

pub use lab::{rgb_to_lab, Lab};
pub use slic::{slic_prompts, slic_segment, SuperpixelMap, DEFAULT_COMPACTNESS, DEFAULT_ITERS};

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::data::PointPrompt;
use crate::error::{Error, Result};

/// `G × G` prompts at cell centers `((i+0.5)/G, (j+0.5)/G)`, row-major
/// (x varies fastest).
pub fn grid_prompts(g: usize) -> Result<Vec<PointPrompt>> {
    if g == 0 {
        return Err(Error::Config("grid size must be >= 1".into()));
    }
    let gf = g as f32;
    Ok((0..g * g)
        .map(|k| PointPrompt {
            x: ((k % g) as f32 + 0.5) / gf,
            y: ((k / g) as f32 + 0.5) / gf,
        })
        .collect())
}

/// Prompting strategy, parsed from `grid:<G>` or `slic:<S>[:compactness]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSpec {
    Grid { g: usize },
    Slic { s: usize, compactness: f32 },
}

impl FromStr for PromptSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("bad prompt spec `{s}`, expected grid:<G> or slic:<S>[:compactness]"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["grid", g] => Ok(PromptSpec::Grid {
                g: g.parse().map_err(|_| bad())?,
            }),
            ["slic", n] => Ok(PromptSpec::Slic {
                s: n.parse().map_err(|_| bad())?,
                compactness: DEFAULT_COMPACTNESS,
            }),
            ["slic", n, c] => Ok(PromptSpec::Slic {
                s: n.parse().map_err(|_| bad())?,
                compactness: c.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptSpec::Grid { g } => write!(f, "grid:{g}"),
            PromptSpec::Slic { s, compactness } => write!(f, "slic:{s}:{compactness}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_one_and_two() {
        assert_eq!(grid_prompts(1).unwrap(), vec![PointPrompt { x: 0.5, y: 0.5 }]);
        let g2: Vec<(f32, f32)> = grid_prompts(2).unwrap().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(g2, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
    }

    #[test]
    fn grid_32_is_distinct_and_in_range() {
        let g = grid_prompts(32).unwrap();
        assert_eq!(g.len(), 1024);
        let mut min_d = f32::INFINITY;
        for (i, a) in g.iter().enumerate() {
            a.validate().unwrap();
            for b in &g[..i] {
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                assert!(d > 0.0);
                min_d = min_d.min(d);
            }
        }
        assert_eq!(min_d, 1.0 / 32.0);
    }

    #[test]
    fn parse_specs() {
        assert_eq!("grid:32".parse::<PromptSpec>().unwrap(), PromptSpec::Grid { g: 32 });
        assert_eq!(
            "slic:144".parse::<PromptSpec>().unwrap(),
            PromptSpec::Slic { s: 144, compactness: 256.0 }
        );
        assert_eq!(
            "slic:64:10".parse::<PromptSpec>().unwrap(),
            PromptSpec::Slic { s: 64, compactness: 10.0 }
        );
        assert!("hex:3".parse::<PromptSpec>().is_err());
        assert!("grid:x".parse::<PromptSpec>().is_err());
    }
}
