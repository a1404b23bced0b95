//! Ablation suites: fusion-method comparison, module pruning, and the
//! temporal-length sweep. Each row runs over several seeds; one frozen
//! teacher per seed is shared by every row.

use rayon::prelude::*;

use crate::encoder::Teacher;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, FusionMode};
use crate::harness::train::{teacher_encoder_spec, train_student, train_teacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    FusionTable,
    PruningTable,
    KSweep,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion_table" => Ok(Suite::FusionTable),
            "pruning_table" => Ok(Suite::PruningTable),
            "k_sweep" => Ok(Suite::KSweep),
            other => Err(Error::Config(format!(
                "unknown suite {other}; expected fusion_table, pruning_table, or k_sweep"
            ))),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Suite::FusionTable => "fusion_table",
            Suite::PruningTable => "pruning_table",
            Suite::KSweep => "k_sweep",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    /// Final-epoch AP per seed, in seed order.
    pub aps: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.aps.iter().sum::<f64>() / self.aps.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.aps.iter().map(|a| (a - m).powi(2)).sum::<f64>() / self.aps.len() as f64).sqrt()
    }
}

fn single_baseline(base: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        fusion_mode: FusionMode::Single,
        use_sa: false,
        use_tm: false,
        use_sup: false,
        ..base.clone()
    }
}

/// Row configurations for a suite, before seed assignment.
pub fn suite_rows(base: &ExperimentConfig, suite: Suite) -> Vec<(String, ExperimentConfig)> {
    match suite {
        Suite::FusionTable => vec![
            ("single".into(), single_baseline(base)),
            (
                "data".into(),
                ExperimentConfig {
                    fusion_mode: FusionMode::Data,
                    use_sa: false,
                    use_tm: false,
                    use_sup: false,
                    ..base.clone()
                },
            ),
            (
                "feature".into(),
                ExperimentConfig {
                    fusion_mode: FusionMode::Feature,
                    use_sa: false,
                    use_tm: false,
                    use_sup: false,
                    ..base.clone()
                },
            ),
            (
                "st".into(),
                ExperimentConfig {
                    fusion_mode: FusionMode::St,
                    use_sa: true,
                    use_tm: true,
                    use_sup: true,
                    ..base.clone()
                },
            ),
        ],
        Suite::PruningTable => {
            let mut rows = Vec::new();
            for bits in 0u8..8 {
                let (sa, tm, sup) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
                let mut label = String::from("base");
                for (on, tag) in [(sa, "+sa"), (tm, "+tm"), (sup, "+sup")] {
                    if on {
                        label.push_str(tag);
                    }
                }
                // without SA or TM there is no multi-frame path: fall back to
                // the single-frame pipeline so the baseline row matches a
                // fusion_mode = single run exactly
                let mode = if sa || tm { FusionMode::St } else { FusionMode::Single };
                rows.push((
                    label,
                    ExperimentConfig {
                        fusion_mode: mode,
                        use_sa: sa,
                        use_tm: tm,
                        use_sup: sup,
                        ..base.clone()
                    },
                ));
            }
            rows
        }
        Suite::KSweep => [1usize, 2, 4, 8]
            .iter()
            .map(|&k| {
                (
                    format!("k{k}"),
                    ExperimentConfig {
                        k,
                        fusion_mode: FusionMode::St,
                        use_sa: true,
                        use_tm: true,
                        use_sup: true,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Train one frozen teacher per seed (seeds are base_seed + index). Teachers
/// train on single-frame scenes, so every row of every suite can share them.
pub fn train_teachers(base: &ExperimentConfig, seeds: usize) -> Result<Vec<Teacher>> {
    (0..seeds)
        .into_par_iter()
        .map(|i| {
            let cfg = ExperimentConfig { seed: base.seed + i as u64, ..base.clone() };
            let (store, _) = train_teacher(&cfg)?;
            Teacher::new(
                store,
                true,
                teacher_encoder_spec(&cfg),
                cfg.teacher_one_hot.then_some(cfg.num_classes),
            )
        })
        .collect()
}

pub fn run_ablation(
    base: &ExperimentConfig,
    suite: Suite,
    seeds: usize,
) -> Result<Vec<AblationRow>> {
    Ok(run_suites(base, &[suite], seeds)?.remove(0))
}

/// Run several suites at once, sharing teachers and deduplicating identical
/// row configurations across suites (e.g. the full method appears in every
/// suite; it is trained once per seed).
pub fn run_suites(
    base: &ExperimentConfig,
    suites: &[Suite],
    seeds: usize,
) -> Result<Vec<Vec<AblationRow>>> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let per_suite: Vec<Vec<(String, ExperimentConfig)>> =
        suites.iter().map(|&s| suite_rows(base, s)).collect();

    // unique row configs, in first-appearance order
    let mut unique: Vec<ExperimentConfig> = Vec::new();
    let mut row_to_unique: Vec<Vec<usize>> = Vec::new();
    for rows in &per_suite {
        let mut idxs = Vec::with_capacity(rows.len());
        for (_, cfg) in rows {
            let idx = match unique.iter().position(|u| u == cfg) {
                Some(i) => i,
                None => {
                    unique.push(cfg.clone());
                    unique.len() - 1
                }
            };
            idxs.push(idx);
        }
        row_to_unique.push(idxs);
    }

    let need_teacher = unique.iter().any(|c| c.use_sup);
    let teachers = if need_teacher {
        train_teachers(base, seeds)?
    } else {
        Vec::new()
    };

    // flatten to (config, seed) runs and execute in parallel
    let runs: Vec<(usize, usize)> = (0..unique.len())
        .flat_map(|u| (0..seeds).map(move |s| (u, s)))
        .collect();
    let aps: Vec<((usize, usize), f64)> = runs
        .par_iter()
        .map(|&(u, s)| -> Result<_> {
            let cfg = ExperimentConfig { seed: base.seed + s as u64, ..unique[u].clone() };
            let teacher = cfg.use_sup.then(|| &teachers[s]);
            let out = train_student(&cfg, teacher)?;
            let ap = out.metrics.last().map_or(0.0, |m| m.ap);
            Ok(((u, s), ap))
        })
        .collect::<Result<_>>()?;
    let mut by_unique: Vec<Vec<f64>> = vec![vec![0.0; seeds]; unique.len()];
    for ((u, s), ap) in aps {
        by_unique[u][s] = ap;
    }

    Ok(per_suite
        .iter()
        .zip(&row_to_unique)
        .map(|(rows, idxs)| {
            rows.iter()
                .zip(idxs)
                .map(|((label, _), &u)| AblationRow {
                    label: label.clone(),
                    aps: by_unique[u].clone(),
                })
                .collect()
        })
        .collect())
}

/// Structured text table: one aggregated line per row.
pub fn format_table(suite: Suite, seeds: usize, rows: &[AblationRow]) -> String {
    let mut out = format!("# suite {suite} seeds {seeds}\n");
    out.push_str("# label mean_ap std_ap per_seed_ap...\n");
    for r in rows {
        out.push_str(&format!("{} {:.4} {:.4}", r.label, r.mean(), r.std()));
        for a in &r.aps {
            out.push_str(&format!(" {a:.4}"));
        }
        out.push('\n');
    }
    out
}

fn row_mean(rows: &[AblationRow], label: &str) -> Result<f64> {
    rows.iter()
        .find(|r| r.label == label)
        .map(|r| r.mean())
        .ok_or_else(|| Error::Contract(format!("ablation table has no row {label}")))
}

/// Directional acceptance checks for a suite's results. A failure is
/// reported, not typed: the CLI maps it to its own exit code.
pub fn assert_suite(suite: Suite, rows: &[AblationRow]) -> std::result::Result<(), String> {
    match suite {
        Suite::FusionTable => {
            let single = row_mean(rows, "single").map_err(|e| e.to_string())?;
            let data = row_mean(rows, "data").map_err(|e| e.to_string())?;
            let feature = row_mean(rows, "feature").map_err(|e| e.to_string())?;
            let st = row_mean(rows, "st").map_err(|e| e.to_string())?;
            if st - single < 0.03 {
                return Err(format!(
                    "st ({st:.4}) must beat single ({single:.4}) by at least 0.03 AP"
                ));
            }
            if st < feature {
                return Err(format!("st ({st:.4}) below feature ({feature:.4})"));
            }
            if feature < data {
                return Err(format!("feature ({feature:.4}) below data ({data:.4})"));
            }
            Ok(())
        }
        Suite::PruningTable => {
            let satm = row_mean(rows, "base+sa+tm").map_err(|e| e.to_string())?;
            let full = row_mean(rows, "base+sa+tm+sup").map_err(|e| e.to_string())?;
            if full - satm < 0.01 {
                return Err(format!(
                    "sa+tm+sup ({full:.4}) must beat sa+tm ({satm:.4}) by at least 0.01 AP"
                ));
            }
            Ok(())
        }
        Suite::KSweep => {
            let k1 = row_mean(rows, "k1").map_err(|e| e.to_string())?;
            let k4 = row_mean(rows, "k4").map_err(|e| e.to_string())?;
            if k4 < k1 {
                return Err(format!("k4 ({k4:.4}) below k1 ({k1:.4})"));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: 4,
            eval_scenes: 2,
            epochs: 1,
            teacher_epochs: 1,
            grid_h: 16,
            grid_w: 16,
            c_p: 3,
            c: 4,
            k: 2,
            num_objects: 2,
            clutter_density: 0.02,
            ..Default::default()
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("fusion_table".parse::<Suite>().unwrap(), Suite::FusionTable);
        assert_eq!("pruning_table".parse::<Suite>().unwrap(), Suite::PruningTable);
        assert_eq!("k_sweep".parse::<Suite>().unwrap(), Suite::KSweep);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fusion_table_has_four_rows_and_formats() {
        let rows = run_ablation(&base(), Suite::FusionTable, 1).unwrap();
        assert_eq!(rows.len(), 4);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["single", "data", "feature", "st"]);
        let table = format_table(Suite::FusionTable, 1, &rows);
        assert_eq!(table.lines().count(), 2 + 4);
        for r in &rows {
            assert_eq!(r.aps.len(), 1);
        }
    }

    #[test]
    fn pruning_table_covers_all_flag_combinations() {
        let rows = suite_rows(&base(), Suite::PruningTable);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].0, "base");
        assert_eq!(rows[0].1.fusion_mode, FusionMode::Single);
        assert_eq!(rows[7].0, "base+sa+tm+sup");
        assert!(rows[7].1.use_sa && rows[7].1.use_tm && rows[7].1.use_sup);
        // SUP-only row stays single-frame
        let sup_only = rows.iter().find(|(l, _)| l == "base+sup").unwrap();
        assert_eq!(sup_only.1.fusion_mode, FusionMode::Single);
    }

    #[test]
    fn pruning_baseline_matches_single_mode_run() {
        let cfg = base();
        let rows = suite_rows(&cfg, Suite::PruningTable);
        let baseline = &rows[0].1;
        let single = single_baseline(&cfg);
        assert_eq!(*baseline, single);
    }

    #[test]
    fn k_sweep_regenerates_scene_length_per_k() {
        let rows = suite_rows(&base(), Suite::KSweep);
        let ks: Vec<usize> = rows.iter().map(|(_, c)| c.k).collect();
        assert_eq!(ks, [1, 2, 4, 8]);
        for (_, c) in &rows {
            assert_eq!(c.scene_config(0).preceding, c.k - 1);
        }
    }

    #[test]
    fn assert_suite_flags_bad_orderings() {
        let rows = vec![
            AblationRow { label: "single".into(), aps: vec![0.5] },
            AblationRow { label: "data".into(), aps: vec![0.5] },
            AblationRow { label: "feature".into(), aps: vec![0.5] },
            AblationRow { label: "st".into(), aps: vec![0.51] },
        ];
        assert!(assert_suite(Suite::FusionTable, &rows).is_err());
        let rows = vec![
            AblationRow { label: "single".into(), aps: vec![0.40] },
            AblationRow { label: "data".into(), aps: vec![0.45] },
            AblationRow { label: "feature".into(), aps: vec![0.47] },
            AblationRow { label: "st".into(), aps: vec![0.55] },
        ];
        assert!(assert_suite(Suite::FusionTable, &rows).is_ok());
    }
}
