//! KITTI-style average precision over 40 recall points.
//!
//! Matching is per image and greedy in descending score order (ties keep
//! input order). A detection is a true positive when it overlaps an
//! unmatched, valid ground truth at or above the threshold. Otherwise, if it
//! overlaps an unmatched ground truth that is ignored at this difficulty, both
//! are dropped from the count. Every other detection of the class is a false
//! positive. Don't-care regions and neighbouring-class rules of the official
//! devkit are not modelled.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::kitti::{list_stems, parse_calib_file, parse_label_file, read_text, LabelRecord, ObjectClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }

    fn limits(self) -> (f64, i32, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }

    /// Whether a ground-truth record counts at this difficulty. Levels are
    /// cumulative: an easy object is also moderate and hard.
    pub fn admits(self, gt: &LabelRecord) -> bool {
        let (min_h, max_occ, max_trunc) = self.limits();
        gt.bbox_height() >= min_h && gt.occluded <= max_occ && gt.truncated <= max_trunc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DifficultyBucket {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

/// Strictest difficulty a ground-truth record satisfies.
pub fn assign_difficulty(gt: &LabelRecord) -> DifficultyBucket {
    if Difficulty::Easy.admits(gt) {
        DifficultyBucket::Easy
    } else if Difficulty::Moderate.admits(gt) {
        DifficultyBucket::Moderate
    } else if Difficulty::Hard.admits(gt) {
        DifficultyBucket::Hard
    } else {
        DifficultyBucket::Ignored
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    ThreeD,
    Bev,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::ThreeD, Metric::Bev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ThreeD => "3d",
            Metric::Bev => "bev",
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::ThreeD => iou_3d(a, b),
            Metric::Bev => iou_bev(a, b),
        }
    }
}

pub const RECALL_POINTS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub name: String,
    /// Overlap threshold per class, in class-id order.
    pub iou_thresholds: [f64; 3],
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("cannot read ground truth directory {path}: {source}")]
    GroundTruth { path: PathBuf, source: crate::kitti::KittiError },
    #[error("no ground-truth files could be evaluated ({0} issues)")]
    NothingEvaluated(usize),
}

impl EvalConfig {
    pub fn official() -> Self {
        Self { name: "official".into(), iou_thresholds: [0.7, 0.5, 0.5] }
    }

    pub fn relaxed() -> Self {
        Self { name: "relaxed".into(), iou_thresholds: [0.5, 0.3, 0.3] }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "official" => Some(Self::official()),
            "relaxed" => Some(Self::relaxed()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(EvalError::Config(format!("threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Ground truth and detections of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub gt: Vec<LabelRecord>,
    pub det: Vec<LabelRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Detections without a score are treated as certain.
pub fn det_score(r: &LabelRecord) -> f64 {
    r.score.unwrap_or(1.0)
}

/// Matches one image. Returns `(score, outcome)` per class detection in input
/// order, and the number of valid ground truths.
pub fn match_frame(
    frame: &Frame,
    class: ObjectClass,
    difficulty: Difficulty,
    metric: Metric,
    threshold: f64,
) -> (Vec<(f64, Outcome)>, usize) {
    let gts: Vec<(Box3D, bool)> = frame
        .gt
        .iter()
        .filter(|g| g.class() == Some(class))
        .filter_map(|g| Some((g.to_box3d()?, difficulty.admits(g))))
        .collect();
    let dets: Vec<(Box3D, f64)> = frame
        .det
        .iter()
        .filter(|d| d.class() == Some(class))
        .filter_map(|d| Some((d.to_box3d()?, det_score(d))))
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut taken = vec![false; gts.len()];
    let mut outcomes = vec![(0.0, Outcome::FalsePositive); dets.len()];
    for &di in &order {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (gi, (g, valid)) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = metric.iou(&dets[di].0, g);
            if iou < threshold {
                continue;
            }
            let slot = &mut best[usize::from(!*valid)];
            if slot.is_none_or(|(_, b)| iou > b) {
                *slot = Some((gi, iou));
            }
        }
        outcomes[di] = match best {
            [Some((gi, _)), _] => {
                taken[gi] = true;
                (dets[di].1, Outcome::TruePositive)
            }
            [None, Some((gi, _))] => {
                taken[gi] = true;
                (dets[di].1, Outcome::Ignored)
            }
            _ => (dets[di].1, Outcome::FalsePositive),
        };
    }
    (outcomes, gts.iter().filter(|g| g.1).count())
}

/// AP of one cell with its counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    /// Percent in `[0, 100]`; `None` when there is no valid ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub matched: usize,
    pub missed: usize,
}

/// AP from pooled `(score, outcome)` pairs. Precision is sampled after each
/// distinct score level; the envelope at recall `r` is the best precision at
/// any level reaching `r`.
pub fn ap_from_outcomes(outcomes: &[(f64, Outcome)], num_gt: usize) -> ApResult {
    let mut scored: Vec<(f64, bool)> = outcomes
        .iter()
        .filter(|o| o.1 != Outcome::Ignored)
        .map(|&(s, o)| (s, o == Outcome::TruePositive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let matched = scored.iter().filter(|s| s.1).count();
    if num_gt == 0 {
        return ApResult { ap: None, num_gt, matched, missed: 0 };
    }
    let mut points: Vec<(usize, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for r in 1..=RECALL_POINTS {
        let p = points
            .iter()
            .filter(|(tp, _)| tp * RECALL_POINTS >= r * num_gt)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        sum += p;
    }
    ApResult { ap: Some(sum / RECALL_POINTS as f64 * 100.0), num_gt, matched, missed: num_gt - matched.min(num_gt) }
}

pub fn ap_r40(frames: &[Frame], class: ObjectClass, difficulty: Difficulty, metric: Metric, threshold: f64) -> ApResult {
    let mut all = Vec::new();
    let mut num_gt = 0;
    for f in frames {
        let (o, n) = match_frame(f, class, difficulty, metric, threshold);
        all.extend(o);
        num_gt += n;
    }
    ap_from_outcomes(&all, num_gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCell {
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub metric: Metric,
    pub threshold: f64,
    pub result: ApResult,
}

/// Every class × difficulty × metric cell for one threshold set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub set_name: String,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn evaluate(frames: &[Frame], cfg: &EvalConfig) -> Self {
        let mut cells = Vec::new();
        for class in ObjectClass::ALL {
            let threshold = cfg.iou_thresholds[class.id()];
            for metric in Metric::ALL {
                for difficulty in Difficulty::ALL {
                    let result = ap_r40(frames, class, difficulty, metric, threshold);
                    cells.push(EvalCell { class, difficulty, metric, threshold, result });
                }
            }
        }
        Self { set_name: cfg.name.clone(), cells }
    }

    pub fn get(&self, class: ObjectClass, difficulty: Difficulty, metric: Metric) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.class == class && c.difficulty == difficulty && c.metric == metric)
    }

    /// Aligned table, one row per class and metric.
    pub fn to_table(&self) -> String {
        let mut s = format!("[{}]\n", self.set_name);
        let _ = writeln!(s, "{:<11} {:<4} {:>5} {:>9} {:>9} {:>9}", "class", "metr", "iou", "easy", "moderate", "hard");
        for class in ObjectClass::ALL {
            for metric in Metric::ALL {
                let mut row = String::new();
                let mut thr = 0.0;
                for d in Difficulty::ALL {
                    let cell = self.get(class, d, metric).expect("complete report");
                    thr = cell.threshold;
                    match cell.result.ap {
                        Some(ap) => {
                            let _ = write!(row, " {ap:>9.2}");
                        }
                        None => row.push_str("       n/a"),
                    }
                }
                let _ = writeln!(s, "{:<11} {:<4} {:>5.2}{}", class.name(), metric.name(), thr, row);
            }
        }
        s
    }

    /// One `key=value` record per cell.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let ap = c.result.ap.map_or("na".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "set={} class={} difficulty={} metric={} iou={:.2} ap={} num_gt={} matched={} missed={}",
                self.set_name,
                c.class.name(),
                c.difficulty.name(),
                c.metric.name(),
                c.threshold,
                ap,
                c.result.num_gt,
                c.result.matched,
                c.result.missed
            );
        }
        s
    }
}

/// Reports for each requested threshold set plus per-file problems.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEvaluation {
    pub reports: Vec<EvalReport>,
    pub issues: Vec<String>,
    pub frames: usize,
}

/// Evaluates every `<id>.txt` in `gt_dir` against `pred_dir/<id>.txt`. A
/// missing prediction file counts as no detections; unreadable files are
/// listed in `issues` and the rest is still evaluated. When `calib_dir` is
/// given each frame's calibration is checked for readability.
pub fn evaluate_split(
    pred_dir: &Path,
    gt_dir: &Path,
    calib_dir: Option<&Path>,
    configs: &[EvalConfig],
) -> Result<SplitEvaluation, EvalError> {
    for c in configs {
        c.validate()?;
    }
    let ids = list_stems(gt_dir, "txt").map_err(|source| EvalError::GroundTruth { path: gt_dir.to_path_buf(), source })?;
    let mut frames = Vec::new();
    let mut issues = Vec::new();
    for id in &ids {
        let gt_path = gt_dir.join(format!("{id}.txt"));
        let gt = match read_text(&gt_path).and_then(|t| parse_label_file(&t)) {
            Ok(g) => g,
            Err(e) => {
                issues.push(format!("{}: {e}", gt_path.display()));
                continue;
            }
        };
        let pred_path = pred_dir.join(format!("{id}.txt"));
        let det = if pred_path.exists() {
            match read_text(&pred_path).and_then(|t| parse_label_file(&t)) {
                Ok(d) => d,
                Err(e) => {
                    issues.push(format!("{}: {e}; treated as empty", pred_path.display()));
                    Vec::new()
                }
            }
        } else {
            issues.push(format!("{}: missing; treated as empty", pred_path.display()));
            Vec::new()
        };
        if let Some(dir) = calib_dir {
            let p = dir.join(format!("{id}.txt"));
            if let Err(e) = read_text(&p).and_then(|t| parse_calib_file(&t)) {
                issues.push(format!("{}: {e}", p.display()));
            }
        }
        frames.push(Frame { gt, det });
    }
    if frames.is_empty() && !ids.is_empty() {
        return Err(EvalError::NothingEvaluated(issues.len()));
    }
    let reports = configs.iter().map(|c| EvalReport::evaluate(&frames, c)).collect();
    Ok(SplitEvaluation { reports, issues, frames: frames.len() })
}
