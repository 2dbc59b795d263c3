//! Analytic FLOPs and parameter counts.
//!
//! Graph-layer costs depend on graph size, so they are evaluated with the
//! mean node and edge counts measured at every pooling stage. For the action
//! task the graph cost of one sample is `s_count` times the per-graph cost.
//! Batch normalisation counts `2C` trainable parameters and no FLOPs; pooling
//! and global average pooling count neither.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::cnn3d::{scale_width, TemporalArch};
use crate::error::{Error, Result};
use crate::graph_build::{EventGraph, GraphBatch};
use crate::graph_pool::{pool_topology, PoolParams};
use crate::train::{HeadSpec, ModelConfig, SpatialSpec};

/// `2 H W (C_in K^2 + 1) C_out`.
pub fn flops_conv2d(h: u64, w: u64, c_in: u64, k: u64, c_out: u64) -> u64 {
    2 * h * w * (c_in * k * k + 1) * c_out
}

/// `N_edge (m+1)^d (3 C_in C_out + 7 d) + (N_edge + N_node) C_out`.
pub fn flops_gconv(n_edge: f64, n_node: f64, m: u32, d: u32, c_in: u64, c_out: u64) -> f64 {
    let per_edge = ((m + 1) as f64).powi(d as i32) * (3 * c_in * c_out + 7 * d as u64) as f64;
    n_edge * per_edge + (n_edge + n_node) * c_out as f64
}

/// `(2 I - 1) O`.
pub fn flops_fc(i: u64, o: u64) -> u64 {
    (2 * i - 1) * o
}

/// `2 H W T (C_in K^3 + 1) C_out`.
pub fn flops_conv3d(h: u64, w: u64, t: u64, c_in: u64, k: u64, c_out: u64) -> u64 {
    2 * h * w * t * (c_in * k * k * k + 1) * c_out
}

/// `(C_in K_elems + 1) C_out` where `K_elems` is the kernel cardinality.
pub fn params_conv(c_in: u64, k_elems: u64, c_out: u64) -> u64 {
    (c_in * k_elems + 1) * c_out
}

/// `(C_in + 1) C_out`.
pub fn params_fc(c_in: u64, c_out: u64) -> u64 {
    (c_in + 1) * c_out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageStats {
    pub mean_nodes: f64,
    pub mean_edges: f64,
}

/// Mean graph size at the input (stage 0) and after each pooling layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphStats {
    pub stages: Vec<StageStats>,
}

pub const STATS_HEADER: &str = "stage,mean_nodes,mean_edges";

impl GraphStats {
    /// Pushes every graph through the pooling chain and averages the sizes.
    pub fn measure(graphs: &[EventGraph], pools: &[PoolParams]) -> Result<GraphStats> {
        if graphs.is_empty() {
            return Err(Error::Invalid("no graphs to measure".into()));
        }
        let mut sums = vec![(0usize, 0usize); pools.len() + 1];
        for g in graphs {
            let (mut batch, _, _) = GraphBatch::single(g);
            sums[0].0 += batch.num_nodes();
            sums[0].1 += batch.num_edges();
            for (k, p) in pools.iter().enumerate() {
                batch = pool_topology(&batch, *p)?.0;
                sums[k + 1].0 += batch.num_nodes();
                sums[k + 1].1 += batch.num_edges();
            }
        }
        let n = graphs.len() as f64;
        let stages = sums
            .into_iter()
            .map(|(v, e)| StageStats {
                mean_nodes: v as f64 / n,
                mean_edges: e as f64 / n,
            })
            .collect();
        Ok(GraphStats { stages })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{STATS_HEADER}\n");
        for (k, s) in self.stages.iter().enumerate() {
            let _ = writeln!(out, "{k},{},{}", s.mean_nodes, s.mean_edges);
        }
        out
    }

    /// Parses the CSV written by [`GraphStats::to_csv`]; stages must be listed
    /// in order starting at 0.
    pub fn from_csv(text: &str) -> Result<GraphStats> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == STATS_HEADER => {}
            _ => {
                return Err(Error::MalformedLine {
                    line: 1,
                    msg: format!("expected header {STATS_HEADER:?}"),
                })
            }
        }
        let mut stages = Vec::new();
        for (i, line) in lines {
            let bad = |msg: String| Error::MalformedLine { line: i + 1, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", fields.len())));
            }
            let stage: usize = fields[0].parse().map_err(|e| bad(format!("stage: {e}")))?;
            if stage != stages.len() {
                return Err(bad(format!("stage {stage} out of order")));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                    _ => Err(bad(format!("{what} {s:?} is not a non-negative number"))),
                }
            };
            stages.push(StageStats {
                mean_nodes: num(fields[1], "mean_nodes")?,
                mean_edges: num(fields[2], "mean_edges")?,
            });
        }
        Ok(GraphStats { stages })
    }

    pub fn load(path: &Path) -> Result<GraphStats> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub layer: String,
    pub kind: &'static str,
    pub flops: f64,
    pub params: u64,
    /// Mean node and edge counts used for graph layers.
    pub graph_size: Option<StageStats>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

pub const REPORT_HEADER: &str = "layer,kind,flops,params,mean_nodes,mean_edges";

impl CostReport {
    pub fn total_flops(&self) -> f64 {
        self.rows.iter().fold(0.0, |acc, r| acc + r.flops)
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Parameter storage in megabytes at 4 bytes per parameter.
    pub fn size_mb(&self) -> f64 {
        self.total_params() as f64 * 4.0 / 1e6
    }

    /// One row per layer, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let (n, e) = r.graph_size.map_or((String::new(), String::new()), |s| {
                (s.mean_nodes.to_string(), s.mean_edges.to_string())
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{n},{e}",
                r.layer, r.kind, r.flops, r.params
            );
        }
        let _ = writeln!(
            out,
            "total,,{},{},,",
            self.total_flops(),
            self.total_params()
        );
        out
    }

    fn push(
        &mut self,
        layer: String,
        kind: &'static str,
        flops: f64,
        params: u64,
        graph_size: Option<StageStats>,
    ) {
        self.rows.push(CostRow {
            layer,
            kind,
            flops,
            params,
            graph_size,
        });
    }

    fn batch_norm(&mut self, layer: &str, channels: usize) {
        self.push(
            format!("{layer}.bn"),
            "batch_norm",
            0.0,
            2 * channels as u64,
            None,
        );
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:<12} {:>16} {:>12}",
            "layer", "kind", "MFLOPs", "params"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:<12} {:>16.3} {:>12}",
                r.layer,
                r.kind,
                r.flops / 1e6,
                r.params
            )?;
        }
        writeln!(
            f,
            "{:<24} {:<12} {:>16.3} {:>12}",
            "total",
            "",
            self.total_flops() / 1e6,
            self.total_params()
        )?;
        write!(
            f,
            "GFLOPs {:.4}, size {:.2} MB",
            self.total_flops() / 1e9,
            self.size_mb()
        )
    }
}

/// Per-layer costs of the network described by `config`, for one sample.
pub fn report_model(config: &ModelConfig, stats: &GraphStats) -> Result<CostReport> {
    config.validate()?;
    let pools = config.pools().len();
    if stats.stages.len() < pools + 1 {
        return Err(Error::Invalid(format!(
            "graph statistics cover {} stages, the model needs {}",
            stats.stages.len(),
            pools + 1
        )));
    }
    let w = |c: usize| scale_width(c, config.width_multiplier);
    let s = config.s_count as f64;
    let m = config.degree as u32;
    let d = config.kernel_size.len() as u32;
    let k_main: u64 = config.kernel_size.iter().map(|&k| k as u64).product();
    let mut report = CostReport::default();
    let gconv = |report: &mut CostReport,
                 name: String,
                 stage: StageStats,
                 c_in: usize,
                 c_out: usize,
                 k_elems: u64| {
        let flops = s * flops_gconv(
            stage.mean_edges,
            stage.mean_nodes,
            m,
            d,
            c_in as u64,
            c_out as u64,
        );
        report.push(
            name.clone(),
            "gconv",
            flops,
            params_conv(c_in as u64, k_elems, c_out as u64),
            Some(stage),
        );
        report.batch_norm(&name, c_out);
    };
    let mut c = 1;
    let mut stage = 0;
    for (i, spec) in config.spatial.iter().enumerate() {
        let name = format!("spatial.{i}");
        let size = stats.stages[stage];
        match *spec {
            SpatialSpec::Conv { out } => {
                gconv(&mut report, name, size, c, w(out), k_main);
                c = w(out);
            }
            SpatialSpec::Res { out } => {
                let out = w(out);
                gconv(&mut report, format!("{name}.main1"), size, c, out, k_main);
                gconv(&mut report, format!("{name}.main2"), size, out, out, k_main);
                gconv(&mut report, format!("{name}.shortcut"), size, c, out, 1);
                c = out;
            }
            SpatialSpec::Pool { .. } => {
                stage += 1;
                report.push(name, "graph_pool", 0.0, 0, Some(stats.stages[stage]));
            }
        }
    }
    let q = config.num_classes as u64;
    match &config.head {
        HeadSpec::Fc { hidden } => {
            let slots = config.final_extent().cells() as u64;
            let mut width = c as u64;
            for (i, &h) in hidden.iter().enumerate() {
                let h = w(h) as u64;
                let fan_in = if i == 0 { slots * width } else { width };
                report.push(
                    format!("head.fc{i}"),
                    "fc",
                    flops_fc(fan_in, h) as f64,
                    params_fc(fan_in, h),
                    None,
                );
                width = h;
            }
            let fan_in = if hidden.is_empty() {
                slots * width
            } else {
                width
            };
            report.push(
                format!("head.fc{}", hidden.len()),
                "fc",
                flops_fc(fan_in, q) as f64,
                params_fc(fan_in, q),
                None,
            );
        }
        HeadSpec::Temporal { arch } => {
            let e = config.final_extent();
            let mut dims = [e.height, e.width, c, config.s_count];
            let conv3 =
                |report: &mut CostReport, name: String, dims: [usize; 4], c_out: usize, k: u64| {
                    let [h, wd, c_in, t] = dims.map(|v| v as u64);
                    report.push(
                        name.clone(),
                        "conv3d",
                        flops_conv3d(h, wd, t, c_in, k, c_out as u64) as f64,
                        params_conv(c_in, k * k * k, c_out as u64),
                        None,
                    );
                    report.batch_norm(&name, c_out);
                };
            let blocks: Vec<(usize, usize)> = match arch {
                TemporalArch::Plain3d => [128, 256, 512, 512].map(|o| (0, w(o))).to_vec(),
                TemporalArch::Res3d => [(256, 512), (512, 1024)]
                    .map(|(a, b)| (w(a), w(b)))
                    .to_vec(),
            };
            for (i, &(inter, out)) in blocks.iter().enumerate() {
                if inter == 0 {
                    conv3(&mut report, format!("head.conv{i}"), dims, out, 3);
                } else {
                    let name = format!("head.res{i}");
                    conv3(&mut report, format!("{name}.conv1"), dims, inter, 3);
                    conv3(
                        &mut report,
                        format!("{name}.conv2"),
                        [dims[0], dims[1], inter, dims[3]],
                        out,
                        3,
                    );
                    conv3(&mut report, format!("{name}.shortcut"), dims, out, 1);
                }
                dims[2] = out;
                dims = pooled_dims(dims, i == 0);
                report.push(format!("head.pool{i}"), "pool3d", 0.0, 0, None);
            }
            let c_last = dims[2] as u64;
            report.push(
                "head.fc".into(),
                "fc",
                flops_fc(c_last, q) as f64,
                params_fc(c_last, q),
                None,
            );
        }
    }
    Ok(report)
}

/// Dims after a `(2, 2, 2)` max pool (stride `(2, 2, 1)` for the first),
/// with the window clamped to the input like the network does.
fn pooled_dims([h, w, c, t]: [usize; 4], first: bool) -> [usize; 4] {
    let stride = if first { [2, 2, 1] } else { [2, 2, 2] };
    let out = |n: usize, s: usize| {
        let win = n.min(2).max(1);
        (n - win) / s + 1
    };
    [out(h, stride[0]), out(w, stride[1]), c, out(t, stride[2])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(flops_conv2d(1, 1, 1, 1, 1), 4);
        assert_eq!(flops_conv2d(2, 2, 3, 3, 4), 896);
        assert_eq!(flops_conv2d(2, 2, 3, 3, 8), 2 * 896);
        assert_eq!(flops_gconv(1.0, 2.0, 1, 2, 1, 1), 71.0);
        assert_eq!(flops_gconv(10.0, 5.0, 1, 2, 2, 4), 1580.0);
        assert_eq!(flops_gconv(0.0, 7.0, 1, 2, 3, 5), 35.0);
        assert_eq!(flops_fc(3, 2), 10);
        assert_eq!(flops_conv3d(1, 1, 1, 1, 1, 1), 4);
        assert_eq!(params_fc(128, 10), 1290);
        assert_eq!(params_conv(32, 25, 64), 51264);
    }

    #[test]
    fn empty_report_is_zero() {
        let r = CostReport::default();
        assert_eq!((r.total_flops(), r.total_params()), (0.0, 0));
        assert!(r.to_csv().ends_with("total,,0,0,,\n"));
    }

    #[test]
    fn stats_csv_round_trip_and_errors() {
        let s = GraphStats {
            stages: vec![
                StageStats {
                    mean_nodes: 10.5,
                    mean_edges: 40.0,
                },
                StageStats {
                    mean_nodes: 2.0,
                    mean_edges: 1.0,
                },
            ],
        };
        assert_eq!(GraphStats::from_csv(&s.to_csv()).unwrap(), s);
        assert!(GraphStats::from_csv("stage,mean_nodes,mean_edges\n1,2,3\n").is_err());
        assert!(GraphStats::from_csv("stage,mean_nodes,mean_edges\n0,-2,3\n").is_err());
        assert!(GraphStats::from_csv("nodes\n").is_err());
    }

    #[test]
    fn pooled_dims_match_trace() {
        assert_eq!(pooled_dims([30, 30, 128, 16], true), [15, 15, 128, 15]);
        assert_eq!(pooled_dims([15, 15, 128, 15], false), [7, 7, 128, 7]);
        assert_eq!(pooled_dims([1, 1, 4, 1], false), [1, 1, 4, 1]);
    }

    fn preset(name: &str) -> ModelConfig {
        let path = format!("{}/../../configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
        ModelConfig::load(Path::new(&path)).unwrap()
    }

    fn flat_stats(n: usize) -> GraphStats {
        GraphStats {
            stages: vec![
                StageStats {
                    mean_nodes: 100.0,
                    mean_edges: 800.0
                };
                n
            ],
        }
    }

    #[test]
    fn preset_parameter_totals() {
        for (name, expect) in [
            ("object_small", 798_666),
            ("object_large", 13_713_125),
            ("action_plain3d", 12_806_661),
            ("action_res3d", 27_168_901),
        ] {
            let cfg = preset(name);
            let report = report_model(&cfg, &flat_stats(cfg.pools().len() + 1)).unwrap();
            assert_eq!(report.total_params(), expect, "{name}");
            let (_, store) = crate::train::Model::build(&cfg, 0).unwrap();
            assert_eq!(store.trainable_count() as u64, expect, "{name}");
        }
    }

    #[test]
    fn graph_rows_use_stage_statistics() {
        let cfg = preset("object_small");
        let stats = GraphStats {
            stages: vec![
                StageStats {
                    mean_nodes: 1000.0,
                    mean_edges: 9000.0,
                },
                StageStats {
                    mean_nodes: 200.0,
                    mean_edges: 900.0,
                },
                StageStats {
                    mean_nodes: 20.0,
                    mean_edges: 40.0,
                },
                StageStats {
                    mean_nodes: 1.0,
                    mean_edges: 0.0,
                },
            ],
        };
        let r = report_model(&cfg, &stats).unwrap();
        let row = |n: &str| r.rows.iter().find(|x| x.layer == n).unwrap();
        assert_eq!(
            row("spatial.0").flops,
            9000.0 * 4.0 * (3.0 * 32.0 + 14.0) + 10000.0 * 32.0
        );
        assert_eq!(
            row("spatial.2.main2").flops,
            900.0 * 4.0 * (3.0 * 64.0 * 64.0 + 14.0) + 1100.0 * 64.0
        );
        assert_eq!(
            row("spatial.4.shortcut").flops,
            40.0 * 4.0 * (3.0 * 64.0 * 128.0 + 14.0) + 60.0 * 128.0
        );
        assert_eq!(row("head.fc0").flops, 255.0 * 128.0);
        let sum = r.rows.iter().fold(0.0, |acc, x| acc + x.flops);
        assert_eq!(r.total_flops(), sum);
        assert!(report_model(&cfg, &flat_stats(3)).is_err());
    }

    #[test]
    fn temporal_rows_follow_shape_trace() {
        let mut cfg = preset("action_plain3d");
        cfg.sensor = crate::train::Sensor {
            width: 1440,
            height: 1440,
        };
        // 1440 / (2 * 4 * 6) = 30 columns, 1440 / (2 * 3 * 8) = 30 rows
        cfg.spatial[3] = SpatialSpec::Pool { size: [4, 3] };
        cfg.spatial[5] = SpatialSpec::Pool { size: [6, 8] };
        assert_eq!(cfg.final_extent(), crate::graph_build::Extent::new(30, 30));
        let r = report_model(&cfg, &flat_stats(4)).unwrap();
        let conv: Vec<f64> = r
            .rows
            .iter()
            .filter(|x| x.kind == "conv3d")
            .map(|x| x.flops)
            .collect();
        let expect = [
            flops_conv3d(30, 30, 16, 128, 3, 128),
            flops_conv3d(15, 15, 15, 128, 3, 256),
            flops_conv3d(7, 7, 7, 256, 3, 512),
            flops_conv3d(3, 3, 3, 512, 3, 512),
        ];
        assert_eq!(conv, expect.map(|v| v as f64));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.rows.len() + 2);
        assert!(csv.starts_with(REPORT_HEADER));
    }
}
