//! Per-layer parameter and FLOP counts, evaluated from the closed-form
//! table formulas for a given configuration.
//!
//! Formulas are kept in their closed form, including two quirks: the 3D
//! convolutions use `K^2` rather than `K^3`, and the codeword layer is
//! counted as an `L_eps x L_eps` map although the implemented layer maps
//! `L_xi_v` to `L_eps`.

use serde::Serialize;

use super::EmevConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Feature,
    Transcoding,
    Decoder,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Feature, Table::Transcoding, Table::Decoder];

    pub fn parse(s: &str) -> Result<Table> {
        match s {
            "feature" => Ok(Table::Feature),
            "transcoding" => Ok(Table::Transcoding),
            "decoder" => Ok(Table::Decoder),
            other => Err(Error::Config(format!("unknown complexity table '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Table::Feature => "feature",
            Table::Transcoding => "transcoding",
            Table::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityRow {
    pub table: Table,
    pub layer: String,
    pub params: u128,
    pub flops: u128,
}

fn row(table: Table, layer: &str, params: u128, flops: u128) -> ComplexityRow {
    ComplexityRow {
        table,
        layer: layer.to_string(),
        params,
        flops,
    }
}

/// Rows for the requested tables, in table order.
pub fn complexity_report(c: &EmevConfig, tables: &[Table]) -> Vec<ComplexityRow> {
    let n = |x: usize| x as u128;
    let (n_rb, n_r, n_t) = (n(c.dims.n_rb), n(c.dims.n_r), n(c.dims.n_t));
    let k2 = n(c.kernel) * n(c.kernel);
    let (f1, f2) = (n(c.feature_filters[0]), n(c.feature_filters[1]));
    let (lv, ls, le) = (n(c.l_xi_v), n(c.l_xi_s), n(c.l_eps));
    let vol = n_rb * n_t * n_t;
    let area = n_rb * n_r;
    let mut rows = Vec::new();
    for &t in Table::ALL.iter().filter(|t| tables.contains(t)) {
        match t {
            Table::Feature => {
                rows.push(row(t, "Conv3D_1", f1 * 2 * k2, vol * f1 * (2 * k2)));
                rows.push(row(t, "Conv2D_1", f1 * 2 * k2, area * f1 * (2 * k2)));
                rows.push(row(t, "Conv3D_2", f2 * 2 * k2, vol * f2 * (2 * k2)));
                rows.push(row(t, "Conv2D_2", f2 * 2 * k2, area * f2 * (2 * k2)));
                rows.push(row(t, "FCLayer_1(V)", vol * f2 * lv, 2 * vol * f2 * lv));
                rows.push(row(t, "FCLayer_1(S)", area * f2 * ls, 2 * area * f2 * ls));
            }
            Table::Transcoding => {
                let cross = lv * lv + ls * ls;
                rows.push(row(t, "Attention_res(V,S)", 2 * cross, 8 * cross));
                let selfs = 2 * lv * lv;
                for _ in 1..c.attention_depth {
                    rows.push(row(t, "Attention_res(V,V)", 2 * selfs, 8 * selfs));
                }
                rows.push(row(t, "FCLayer_codewords", le * le, 2 * le * le));
            }
            Table::Decoder => {
                let v_out = vol * 2;
                rows.push(row(t, "FCLayer_2(V)", le * v_out, 2 * le * v_out));
                rows.push(row(t, "FCLayer_2(S)", le * area, 2 * le * area));
                let sv: u128 = c.res_filters_v.iter().map(|&x| n(x)).sum();
                let ss: u128 = c.res_filters_s.iter().map(|&x| n(x)).sum();
                for _ in 0..c.res_blocks {
                    rows.push(row(t, "Conv3D_res", sv * 2 * k2, vol * sv * (sv * k2)));
                }
                for _ in 0..c.res_blocks {
                    rows.push(row(t, "Conv2D_res", ss * 2 * k2, area * ss * (ss * k2)));
                }
                rows.push(row(t, "Conv3D_3", 2 * 2 * k2, vol * 2 * (2 * k2)));
                rows.push(row(t, "Conv2D_3", 2 * k2, area * (2 * k2)));
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_convolution_at_full_scale() {
        let rows = complexity_report(&EmevConfig::full(416), &[Table::Feature]);
        assert_eq!(rows[0].layer, "Conv3D_1");
        assert_eq!(rows[0].params, 36);
        assert_eq!(rows[0].flops, 1_916_928);
    }

    #[test]
    fn cross_attention_at_full_scale() {
        let rows = complexity_report(&EmevConfig::full(416), &[Table::Transcoding]);
        assert_eq!(rows[0].params, 532_480);
        assert_eq!(
            rows.iter()
                .filter(|r| r.layer == "Attention_res(V,V)")
                .count(),
            4
        );
    }

    #[test]
    fn no_tables_no_rows() {
        assert!(complexity_report(&EmevConfig::toy(16), &[]).is_empty());
    }
}
