//! Attention-map extraction: capture per-layer, per-head weights from a
//! forward pass, serialize them as JSON, and render single rows as PPM
//! heatmaps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdError;
use crate::chess::{HistoryWindow, Square};
use crate::encoding::{encode_position, legal_mask};
use crate::model::Model;

#[derive(Debug, Error)]
pub enum IntrospectError {
    #[error("{path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("layer {layer} out of range, dump has {layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("head {head} out of range, dump has {heads}")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] AdError),
}

/// Attention weights of one position: `layers x heads x 64 x 64`, each row
/// the softmax distribution of one query token. Tokens are squares from
/// the mover's perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub fen: String,
    pub layers: usize,
    pub heads: usize,
    weights: Vec<f32>,
}

impl AttentionDump {
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let off = ((layer * self.heads + head) * 64 + query) * 64;
        &self.weights[off..off + 64]
    }

    fn check_indices(&self, layer: usize, head: usize) -> Result<(), IntrospectError> {
        if layer >= self.layers {
            return Err(IntrospectError::LayerOutOfRange {
                layer,
                layers: self.layers,
            });
        }
        if head >= self.heads {
            return Err(IntrospectError::HeadOutOfRange {
                head,
                heads: self.heads,
            });
        }
        Ok(())
    }

    /// Rows must be distributions: entries in [0,1], sums within 1e-5 of 1.
    pub fn validate(&self) -> Result<(), IntrospectError> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for q in 0..64 {
                    let row = self.row(l, h, q);
                    let mut sum = 0.0f64;
                    for (k, &w) in row.iter().enumerate() {
                        if !(0.0..=1.0).contains(&w) {
                            return Err(IntrospectError::Schema {
                                path: format!("layers[{l}].heads[{h}].weights[{q}][{k}]"),
                                reason: format!("weight {w} outside [0,1]"),
                            });
                        }
                        sum += w as f64;
                    }
                    if (sum - 1.0).abs() > 1e-5 {
                        return Err(IntrospectError::Schema {
                            path: format!("layers[{l}].heads[{h}].weights[{q}]"),
                            reason: format!("row sums to {sum}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs a forward pass with attention capture.
pub fn capture(model: &Model, history: &HistoryWindow) -> Result<AttentionDump, IntrospectError> {
    let state = history.current();
    let out = model.forward(&encode_position(history), &legal_mask(state), true)?;
    let attention = out.attention.expect("capture flag set");
    Ok(AttentionDump {
        fen: state.to_fen(),
        layers: model.config.layers,
        heads: model.config.heads,
        weights: attention.data().to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpDoc {
    fen: String,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    layer: usize,
    heads: Vec<HeadDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    head: usize,
    weights: Vec<Vec<f32>>,
}

pub fn to_json(dump: &AttentionDump) -> String {
    let layers = (0..dump.layers)
        .map(|l| LayerDoc {
            layer: l,
            heads: (0..dump.heads)
                .map(|h| HeadDoc {
                    head: h,
                    weights: (0..64).map(|q| dump.row(l, h, q).to_vec()).collect(),
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&DumpDoc {
        fen: dump.fen.clone(),
        layers,
    })
    .expect("attention dump serializes")
}

pub fn from_json(text: &str) -> Result<AttentionDump, IntrospectError> {
    let doc: DumpDoc = serde_json::from_str(text)?;
    let layers = doc.layers.len();
    let mut heads = 0;
    let mut weights = Vec::new();
    for (l, layer) in doc.layers.iter().enumerate() {
        if layer.layer != l {
            return Err(IntrospectError::Schema {
                path: format!("layers[{l}].layer"),
                reason: format!("expected index {l}, found {}", layer.layer),
            });
        }
        if l == 0 {
            heads = layer.heads.len();
        } else if layer.heads.len() != heads {
            return Err(IntrospectError::Schema {
                path: format!("layers[{l}].heads"),
                reason: format!("expected {heads} heads, found {}", layer.heads.len()),
            });
        }
        for (h, head) in layer.heads.iter().enumerate() {
            if head.head != h {
                return Err(IntrospectError::Schema {
                    path: format!("layers[{l}].heads[{h}].head"),
                    reason: format!("expected index {h}, found {}", head.head),
                });
            }
            if head.weights.len() != 64 {
                return Err(IntrospectError::Schema {
                    path: format!("layers[{l}].heads[{h}].weights"),
                    reason: format!("expected 64 rows, found {}", head.weights.len()),
                });
            }
            for (q, row) in head.weights.iter().enumerate() {
                if row.len() != 64 {
                    return Err(IntrospectError::Schema {
                        path: format!("layers[{l}].heads[{h}].weights[{q}]"),
                        reason: format!("expected 64 entries, found {}", row.len()),
                    });
                }
                weights.extend_from_slice(row);
            }
        }
    }
    let dump = AttentionDump {
        fen: doc.fen,
        layers,
        heads,
        weights,
    };
    dump.validate()?;
    Ok(dump)
}

/// Linear purple-to-yellow ramp (68,1,84) -> (253,231,37), the palette the
/// heatmaps use. Monotone in w; the red channel strictly increases for
/// weight steps of 1/64 or coarser (finer steps collide in 8-bit color).
pub fn ramp(w: f32) -> [u8; 3] {
    let t = w.clamp(0.0, 1.0) as f64;
    let ch = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [ch(68.0, 253.0), ch(1.0, 231.0), ch(84.0, 37.0)]
}

const SCALE: usize = 32;
const SIDE: usize = 8 * SCALE;
const BORDER: usize = 2;
const RED: [u8; 3] = [255, 0, 0];

/// Renders one attention row as a 256x256 binary PPM: the board from the
/// mover's perspective, eighth rank at the top, each square filled with
/// the ramp color of its weight, the query square outlined in red.
pub fn to_heatmap(
    dump: &AttentionDump,
    layer: usize,
    head: usize,
    query: Square,
    path: &Path,
) -> Result<(), IntrospectError> {
    let bytes = render_heatmap(dump, layer, head, query)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn render_heatmap(
    dump: &AttentionDump,
    layer: usize,
    head: usize,
    query: Square,
) -> Result<Vec<u8>, IntrospectError> {
    dump.check_indices(layer, head)?;
    let row = dump.row(layer, head, query.index());
    let mut out = Vec::with_capacity(15 + SIDE * SIDE * 3);
    out.extend_from_slice(b"P6\n256 256\n255\n");
    for y in 0..SIDE {
        let rank = 7 - y / SCALE;
        for x in 0..SIDE {
            let file = x / SCALE;
            let sq = rank * 8 + file;
            let (ly, lx) = (y % SCALE, x % SCALE);
            let on_border =
                ly < BORDER || ly >= SCALE - BORDER || lx < BORDER || lx >= SCALE - BORDER;
            let color = if sq == query.index() && on_border {
                RED
            } else {
                ramp(row[sq])
            };
            out.extend_from_slice(&color);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PosRepKind;
    use crate::chess::GameState;
    use crate::model::tests_support::tiny_config;

    fn startpos_dump() -> AttentionDump {
        let model = Model::init(tiny_config(PosRepKind::Shaw), 23).unwrap();
        let w = HistoryWindow::start(GameState::startpos());
        capture(&model, &w).unwrap()
    }

    #[test]
    fn capture_shape_and_rows() {
        let dump = startpos_dump();
        assert_eq!(dump.layers, 2);
        assert_eq!(dump.heads, 2);
        assert_eq!(dump.weights.len(), 2 * 2 * 64 * 64);
        dump.validate().unwrap();
        let again = startpos_dump();
        assert_eq!(dump, again);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let dump = startpos_dump();
        let text = to_json(&dump);
        let back = from_json(&text).unwrap();
        assert_eq!(dump, back);
        // Emitted indices are strictly increasing.
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let layers = doc["layers"].as_array().unwrap();
        for (l, layer) in layers.iter().enumerate() {
            assert_eq!(layer["layer"].as_u64().unwrap() as usize, l);
            for (h, head) in layer["heads"].as_array().unwrap().iter().enumerate() {
                assert_eq!(head["head"].as_u64().unwrap() as usize, h);
            }
        }
    }

    #[test]
    fn bad_documents_name_the_path() {
        let dump = startpos_dump();
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&dump)).unwrap();
        doc["layers"][1]["heads"][0]["weights"][3][7] = 1.5f64.into();
        match from_json(&doc.to_string()) {
            Err(IntrospectError::Schema { path, .. }) => {
                assert_eq!(path, "layers[1].heads[0].weights[3][7]");
            }
            other => panic!("expected schema error, got {other:?}"),
        }

        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&dump)).unwrap();
        doc["layers"][0]["layer"] = 5.into();
        assert!(matches!(
            from_json(&doc.to_string()),
            Err(IntrospectError::Schema { .. })
        ));

        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&dump)).unwrap();
        doc["layers"][0]["heads"][1]["weights"][0] = serde_json::json!([0.5, 0.5]);
        assert!(matches!(
            from_json(&doc.to_string()),
            Err(IntrospectError::Schema { .. })
        ));

        // A distribution that does not sum to 1 is rejected even though
        // every entry is in range.
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&dump)).unwrap();
        doc["layers"][0]["heads"][0]["weights"][0] = serde_json::json!(vec![0.9; 64]);
        assert!(matches!(
            from_json(&doc.to_string()),
            Err(IntrospectError::Schema { .. })
        ));

        // Unknown keys are schema violations.
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&dump)).unwrap();
        doc["extra"] = 1.into();
        assert!(from_json(&doc.to_string()).is_err());
    }

    fn synthetic_dump(rows: impl Fn(usize) -> [f32; 64]) -> AttentionDump {
        let mut weights = Vec::with_capacity(64 * 64);
        for q in 0..64 {
            weights.extend_from_slice(&rows(q));
        }
        AttentionDump {
            fen: "synthetic".to_string(),
            layers: 1,
            heads: 1,
            weights,
        }
    }

    #[test]
    fn heatmap_bytes_and_header() {
        let dump = synthetic_dump(|_| [1.0 / 64.0; 64]);
        let bytes = render_heatmap(&dump, 0, 0, Square::new(12),).unwrap();
        assert_eq!(bytes.len(), 15 + 256 * 256 * 3);
        assert_eq!(&bytes[..15], b"P6\n256 256\n255\n");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        to_heatmap(&dump, 0, 0, Square::new(12), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    fn square_pixel(bytes: &[u8], sq: usize, ly: usize, lx: usize) -> [u8; 3] {
        let (rank, file) = (sq / 8, sq % 8);
        let y = (7 - rank) * SCALE + ly;
        let x = file * SCALE + lx;
        let off = 15 + (y * SIDE + x) * 3;
        [bytes[off], bytes[off + 1], bytes[off + 2]]
    }

    #[test]
    fn uniform_row_is_flat_except_the_query_border() {
        let dump = synthetic_dump(|_| [1.0 / 64.0; 64]);
        let query = Square::new(27);
        let bytes = render_heatmap(&dump, 0, 0, query).unwrap();
        let base = ramp(1.0 / 64.0);
        for sq in 0..64 {
            let center = square_pixel(&bytes, sq, 16, 16);
            assert_eq!(center, base);
            let corner = square_pixel(&bytes, sq, 0, 0);
            if sq == query.index() {
                assert_eq!(corner, RED);
                // The border is two pixels wide, the third is interior.
                assert_eq!(square_pixel(&bytes, sq, 1, 16), RED);
                assert_eq!(square_pixel(&bytes, sq, 2, 16), base);
            } else {
                assert_eq!(corner, base);
            }
        }
    }

    #[test]
    fn one_hot_row_has_one_bright_square() {
        let hot = 44;
        let dump = synthetic_dump(move |_| {
            let mut row = [0.0; 64];
            row[hot] = 1.0;
            row
        });
        let bytes = render_heatmap(&dump, 0, 0, Square::new(0)).unwrap();
        let bright: Vec<usize> = (0..64)
            .filter(|&sq| square_pixel(&bytes, sq, 16, 16) == ramp(1.0))
            .collect();
        assert_eq!(bright, vec![hot]);
    }

    #[test]
    fn out_of_range_indices_error() {
        let dump = synthetic_dump(|_| [1.0 / 64.0; 64]);
        assert!(matches!(
            render_heatmap(&dump, 1, 0, Square::new(0)),
            Err(IntrospectError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            render_heatmap(&dump, 0, 3, Square::new(0)),
            Err(IntrospectError::HeadOutOfRange { .. })
        ));
    }

    #[test]
    fn ramp_is_monotone() {
        assert_eq!(ramp(0.0), [68, 1, 84]);
        assert_eq!(ramp(1.0), [253, 231, 37]);
        assert_eq!(ramp(-0.5), ramp(0.0));
        assert_eq!(ramp(1.5), ramp(1.0));
        // Componentwise monotone along the table: red and green rise,
        // blue falls; the red channel strictly increases at 1/64 steps.
        for i in 0..255 {
            let a = ramp(i as f32 / 255.0);
            let b = ramp((i + 1) as f32 / 255.0);
            assert!(b[0] >= a[0] && b[1] >= a[1] && b[2] <= a[2]);
        }
        for k in 0..64 {
            let a = ramp(k as f32 / 64.0);
            let b = ramp((k + 1) as f32 / 64.0);
            assert!(b[0] > a[0], "red channel stalled at step {k}");
        }
    }
}
