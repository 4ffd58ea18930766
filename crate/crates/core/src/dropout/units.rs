//! Counting patch-dropout units against weight-dropout units for a conv stack.
//!
//! A patch-level Bernoulli distribution drops every output location of every
//! filter independently (`H·W·C_out` units); weight dropout has one unit per
//! kernel element and bias (`k·k·C_in·C_out + C_out`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub name: String,
    pub kernel: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub height: u64,
    pub width: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct UnitCount {
    pub patch_count: u64,
    pub weight_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitReport {
    pub layers: Vec<(String, UnitCount)>,
    pub total: UnitCount,
}

impl UnitReport {
    /// Fraction by which weight units undercut patch units.
    pub fn reduction(&self) -> f64 {
        1.0 - self.total.weight_count as f64 / self.total.patch_count as f64
    }
}

pub fn count_layer(l: &ConvLayerSpec) -> Result<UnitCount> {
    if [l.kernel, l.c_in, l.c_out, l.height, l.width].contains(&0) {
        return Err(Error::Config(format!("layer `{}` has a zero extent", l.name)));
    }
    Ok(UnitCount {
        patch_count: l.height * l.width * l.c_out,
        weight_count: l.kernel * l.kernel * l.c_in * l.c_out + l.c_out,
    })
}

pub fn count_units(layers: &[ConvLayerSpec]) -> Result<UnitReport> {
    let mut out = Vec::with_capacity(layers.len());
    let mut total = UnitCount {
        patch_count: 0,
        weight_count: 0,
    };
    for l in layers {
        let c = count_layer(l)?;
        total.patch_count += c.patch_count;
        total.weight_count += c.weight_count;
        out.push((l.name.clone(), c));
    }
    Ok(UnitReport { layers: out, total })
}

fn spec(name: &str, c_in: u64, c_out: u64, h: u64, w: u64) -> ConvLayerSpec {
    ConvLayerSpec {
        name: name.into(),
        kernel: 3,
        c_in,
        c_out,
        height: h,
        width: w,
    }
}

/// The street-scene generator's fifteen 3×3 convolutions at 128×256 input,
/// 76 input channels (four past frames of 19 class confidences), with
/// input channels following the residual/pool/upsample wiring.
pub fn street_generator_layers() -> Vec<ConvLayerSpec> {
    vec![
        spec("Conv1,1", 76, 128, 128, 256),
        spec("Conv1,2", 128, 128, 128, 256),
        spec("Conv1,3", 128, 128, 128, 256),
        spec("Conv2,1", 128, 256, 64, 128),
        spec("Conv2,2", 256, 256, 64, 128),
        spec("Conv2,3", 256, 256, 64, 128),
        spec("Conv3,1", 256, 512, 32, 64),
        spec("Conv3,2", 512, 512, 32, 64),
        spec("Conv3,3", 512, 512, 32, 64),
        spec("Conv4,1", 512, 256, 64, 128),
        spec("Conv4,2", 256, 256, 64, 128),
        spec("Conv4,3", 256, 256, 64, 128),
        spec("Conv5,1", 256, 128, 128, 256),
        spec("Conv5,2", 128, 64, 128, 256),
        spec("Conv5,3", 64, 64, 128, 256),
    ]
}

/// Values as printed in the published layer table, `(name, patches, weights)`.
const PRINTED: [(&str, u64, u64); 15] = [
    ("Conv1,1", 4_194_364, 87_680),
    ("Conv1,2", 4_194_364, 147_584),
    ("Conv1,3", 4_194_364, 147_584),
    ("Conv2,1", 2_097_152, 290_168),
    ("Conv2,2", 2_097_152, 590_080),
    ("Conv2,3", 2_097_152, 590_080),
    ("Conv3,1", 1_048_576, 1_180_160),
    ("Conv3,2", 1_048_576, 2_359_808),
    ("Conv3,3", 1_048_576, 2_359_808),
    ("Conv4,1", 2_097_152, 1_180_160),
    ("Conv4,2", 2_097_152, 590_080),
    ("Conv4,3", 2_097_152, 590_080),
    ("Conv5,1", 4_194_364, 295_040),
    ("Conv5,2", 2_097_152, 73_792),
    ("Conv5,3", 2_097_152, 36_928),
];

/// One row comparing formula counts with the printed table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table10Row {
    pub layer: String,
    pub computed: UnitCount,
    pub printed_patches: u64,
    pub printed_weights: u64,
}

impl Table10Row {
    pub fn patches_match(&self) -> bool {
        self.computed.patch_count == self.printed_patches
    }

    pub fn weights_match(&self) -> bool {
        self.computed.weight_count == self.printed_weights
    }
}

/// Formula counts for the street generator next to the printed values.
pub fn table10_report() -> Vec<Table10Row> {
    street_generator_layers()
        .iter()
        .zip(PRINTED)
        .map(|(l, (name, p, w))| {
            debug_assert_eq!(l.name, name);
            Table10Row {
                layer: l.name.clone(),
                computed: count_layer(l).expect("static layer table"),
                printed_patches: p,
                printed_weights: w,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        let c = count_layer(&spec("a", 128, 128, 128, 256)).unwrap();
        assert_eq!(c.weight_count, 147_584);
        assert_eq!(c.patch_count, 4_194_304);
        assert_eq!(count_layer(&spec("b", 76, 128, 1, 1)).unwrap().weight_count, 87_680);
        assert!(count_layer(&spec("z", 0, 1, 1, 1)).is_err());
    }

    #[test]
    fn weight_units_undercut_patch_units_for_street_model() {
        let r = count_units(&street_generator_layers()).unwrap();
        // Deep low-resolution layers carry more weights than patches; only
        // the network total is smaller.
        assert!(r.total.weight_count < r.total.patch_count);
        let heavy: Vec<_> = r.layers.iter().filter(|(_, c)| c.weight_count > c.patch_count).map(|(n, _)| n.as_str()).collect();
        assert_eq!(heavy, ["Conv3,1", "Conv3,2", "Conv3,3"]);
        assert!(r.reduction() > 0.5);
        let sum: u64 = r.layers.iter().map(|(_, c)| c.weight_count).sum();
        assert_eq!(sum, r.total.weight_count);
    }

    #[test]
    fn known_typographical_rows_are_the_only_mismatches() {
        let rows = table10_report();
        let bad_w: Vec<_> = rows.iter().filter(|r| !r.weights_match()).map(|r| r.layer.as_str()).collect();
        assert_eq!(bad_w, ["Conv2,1", "Conv4,1"]);
        let bad_p: Vec<_> = rows.iter().filter(|r| !r.patches_match()).map(|r| r.layer.as_str()).collect();
        assert_eq!(bad_p, ["Conv1,1", "Conv1,2", "Conv1,3", "Conv5,1"]);
    }
}
