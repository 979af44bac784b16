use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::auc::roc_auc;
use super::prototype::{build_prototype_from_paths, Prototype};
use super::scoring::{distance_map, export_heatmap, score_features, Label, ScorePoint};
use super::svm::{fit_linear_svm, svm_decision, DEFAULT_C};
use crate::data::dataset::{ClassEntry, DatasetIndex};
use crate::data::image::{load_and_preprocess, DEFAULT_TARGET_SIDE};
use crate::error::{Error, Result};
use crate::model::FeatureExtractor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub target_side: usize,
    pub svm_c: f64,
    /// Heatmaps of every test image for the first repetition.
    pub heatmap_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_side: DEFAULT_TARGET_SIDE,
            svm_c: DEFAULT_C,
            heatmap_dir: None,
        }
    }
}

/// AUC of one (class, defect type) pairing across repetitions.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub class_name: String,
    pub defect_type: String,
    pub aucs: Vec<f64>,
    pub svm_converged: Vec<bool>,
}

impl CellResult {
    pub fn mean(&self) -> f64 {
        mean(&self.aucs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsentCell {
    pub class_name: String,
    pub defect_type: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub repetitions: usize,
    pub cells: Vec<CellResult>,
    /// Pairings that could not be scored, e.g. an empty defect folder.
    pub absent: Vec<AbsentCell>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn class_means(&self) -> BTreeMap<String, f64> {
        group_means(self.cells.iter().map(|c| (c.class_name.clone(), c.mean())))
    }

    pub fn defect_means(&self) -> BTreeMap<String, f64> {
        group_means(self.cells.iter().map(|c| (c.defect_type.clone(), c.mean())))
    }

    pub fn mean_of_class_means(&self) -> Option<f64> {
        let m: Vec<f64> = self.class_means().into_values().collect();
        (!m.is_empty()).then(|| mean(&m))
    }

    pub fn mean_of_defect_means(&self) -> Option<f64> {
        let m: Vec<f64> = self.defect_means().into_values().collect();
        (!m.is_empty()).then(|| mean(&m))
    }

    /// CSV with header `class,defect_type,repetition,auc`: one row per cell
    /// and repetition, then a `mean` row per cell, per class (`ALL` defect
    /// type) and per defect type (`ALL` class), then the two overall means.
    /// Absent cells appear as `absent` rows with an empty AUC.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,defect_type,repetition,auc\n");
        for c in &self.cells {
            for (r, auc) in c.aucs.iter().enumerate() {
                writeln!(s, "{},{},{},{:.6}", c.class_name, c.defect_type, r, auc).unwrap();
            }
        }
        for c in &self.cells {
            writeln!(s, "{},{},mean,{:.6}", c.class_name, c.defect_type, c.mean()).unwrap();
        }
        for (class, m) in self.class_means() {
            writeln!(s, "{class},ALL,mean,{m:.6}").unwrap();
        }
        for (defect, m) in self.defect_means() {
            writeln!(s, "ALL,{defect},mean,{m:.6}").unwrap();
        }
        if let Some(m) = self.mean_of_class_means() {
            writeln!(s, "ALL,ALL,mean_of_class_means,{m:.6}").unwrap();
        }
        if let Some(m) = self.mean_of_defect_means() {
            writeln!(s, "ALL,ALL,mean_of_defect_means,{m:.6}").unwrap();
        }
        for a in &self.absent {
            writeln!(s, "{},{},absent,", a.class_name, a.defect_type).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn group_means(items: impl Iterator<Item = (String, f64)>) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, v) in items {
        groups.entry(k).or_default().push(v);
    }
    groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

/// Everything one evaluation produced.
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: EvalReport,
    /// `prototypes[rep][class]`, classes in index order.
    pub prototypes: Vec<Vec<Prototype>>,
    /// Score points of every test image, per repetition.
    pub points: Vec<Vec<ScorePoint>>,
}

/// Scores every test image of one class against its prototype. Heatmaps,
/// when requested, go to `<dir>/<class>/<good|defect>/<image stem>.png`.
pub fn score_class(
    net: &FeatureExtractor<f32>,
    class: &ClassEntry,
    proto: &Prototype,
    cfg: &EvalConfig,
    heatmap_dir: Option<&Path>,
) -> Result<Vec<ScorePoint>> {
    let mut jobs: Vec<(&Path, Label, Option<&str>)> = class
        .test_good
        .iter()
        .map(|p| (p.as_path(), Label::Good, None))
        .collect();
    for (defect, paths) in &class.test_defective {
        jobs.extend(
            paths
                .iter()
                .map(|p| (p.as_path(), Label::Defective, Some(defect.as_str()))),
        );
    }
    jobs.into_par_iter()
        .map(|(path, label, defect)| {
            let img = load_and_preprocess(path, cfg.target_side)?;
            let map = distance_map(net, &img, proto)?;
            let stem = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            if let Some(dir) = heatmap_dir {
                let sub = defect.unwrap_or("good");
                export_heatmap(
                    &map,
                    &dir.join(&class.name).join(sub).join(format!("{stem}.png")),
                )?;
            }
            let (mean_distance, max_distance) = score_features(&map);
            Ok(ScorePoint {
                class_name: class.name.clone(),
                image_id: format!("{}/{}", defect.unwrap_or("good"), stem),
                mean_distance,
                max_distance,
                label,
                defect_type: defect.map(str::to_owned),
            })
        })
        .collect()
}

/// SVM on the good points plus one defect type's points, then AUC of the
/// decision values with defective as the positive class.
pub fn cell_auc(points: &[ScorePoint], defect_type: &str, c: f64) -> Result<(f64, bool)> {
    let chosen: Vec<&ScorePoint> = points
        .iter()
        .filter(|p| p.label == Label::Good || p.defect_type.as_deref() == Some(defect_type))
        .collect();
    let feats: Vec<[f64; 2]> = chosen.iter().map(|p| p.features()).collect();
    let labels: Vec<i8> = chosen.iter().map(|p| p.label.sign()).collect();
    let model = fit_linear_svm(&feats, &labels, c)?;
    let scores: Vec<f64> = feats.iter().map(|&f| svm_decision(&model, f)).collect();
    Ok((roc_auc(&scores, &labels)?, model.converged))
}

/// One repetition per network: build each class prototype from its
/// reserved good images, score the test images, and compute the AUC of
/// every (class, defect type) cell.
pub fn evaluate(
    nets: &[FeatureExtractor<f32>],
    index: &DatasetIndex,
    cfg: &EvalConfig,
) -> Result<EvalRun> {
    if nets.is_empty() {
        return Err(Error::config("evaluation needs at least one network"));
    }
    let mut prototypes = Vec::with_capacity(nets.len());
    let mut points = Vec::with_capacity(nets.len());
    for (rep, net) in nets.iter().enumerate() {
        let heatmaps = if rep == 0 {
            cfg.heatmap_dir.as_deref()
        } else {
            None
        };
        let mut rep_protos = Vec::with_capacity(index.classes.len());
        let mut rep_points = Vec::new();
        for class in &index.classes {
            let proto = build_prototype_from_paths(
                net,
                &class.name,
                &class.prototype_good,
                cfg.target_side,
            )?;
            rep_points.extend(score_class(net, class, &proto, cfg, heatmaps)?);
            rep_protos.push(proto);
        }
        prototypes.push(rep_protos);
        points.push(rep_points);
    }

    let mut report = EvalReport {
        repetitions: nets.len(),
        ..EvalReport::default()
    };
    for class in &index.classes {
        for (defect, paths) in &class.test_defective {
            let reason = if paths.is_empty() {
                Some("no defective test images")
            } else if class.test_good.is_empty() {
                Some("no good test images")
            } else {
                None
            };
            if let Some(reason) = reason {
                report.absent.push(AbsentCell {
                    class_name: class.name.clone(),
                    defect_type: defect.clone(),
                    reason: reason.into(),
                });
                continue;
            }
            let mut cell = CellResult {
                class_name: class.name.clone(),
                defect_type: defect.clone(),
                aucs: Vec::new(),
                svm_converged: Vec::new(),
            };
            for rep_points in &points {
                let class_points: Vec<ScorePoint> = rep_points
                    .iter()
                    .filter(|p| p.class_name == class.name)
                    .cloned()
                    .collect();
                let (auc, converged) = cell_auc(&class_points, defect, cfg.svm_c)?;
                cell.aucs.push(auc);
                cell.svm_converged.push(converged);
            }
            report.cells.push(cell);
        }
    }
    Ok(EvalRun {
        report,
        prototypes,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(class: &str, defect: &str, aucs: &[f64]) -> CellResult {
        CellResult {
            class_name: class.into(),
            defect_type: defect.into(),
            aucs: aucs.to_vec(),
            svm_converged: vec![true; aucs.len()],
        }
    }

    fn sample() -> EvalReport {
        EvalReport {
            repetitions: 3,
            cells: vec![
                cell("a", "blob", &[1.0, 0.9, 0.8]),
                cell("a", "scratch", &[0.5, 0.5, 0.5]),
                cell("b", "blob", &[0.6, 0.7, 0.8]),
            ],
            absent: vec![],
        }
    }

    #[test]
    fn csv_row_count_and_means() {
        let r = sample();
        let csv = r.to_csv();
        // 3 cells x 3 reps, 3 cell means, 2 class means, 2 defect means, 2 overall
        assert_eq!(csv.lines().count(), 1 + 9 + 3 + 2 + 2 + 2);
        assert!(csv.contains("a,blob,mean,0.900000\n"));
        assert!(csv.contains("a,ALL,mean,0.700000\n"));
        assert!(csv.contains("ALL,blob,mean,0.800000\n"));
        assert!(csv.contains("ALL,ALL,mean_of_class_means,0.700000\n"));
        assert_eq!(csv, sample().to_csv());
    }

    #[test]
    fn cell_auc_separates_obvious_points() {
        let pt = |label, defect: Option<&str>, m, x| ScorePoint {
            class_name: "a".into(),
            image_id: String::new(),
            mean_distance: m,
            max_distance: x,
            label,
            defect_type: defect.map(str::to_owned),
        };
        let points = vec![
            pt(Label::Good, None, 0.1, 0.5),
            pt(Label::Good, None, 0.12, 0.45),
            pt(Label::Defective, Some("blob"), 0.2, 2.0),
            pt(Label::Defective, Some("blob"), 0.25, 3.0),
            pt(Label::Defective, Some("scratch"), 0.05, 0.1),
        ];
        let (auc, converged) = cell_auc(&points, "blob", DEFAULT_C).unwrap();
        assert_eq!(auc, 1.0);
        assert!(converged);
    }
}
