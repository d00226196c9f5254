use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Mode;
use crate::metrics::Prf;
use crate::retrieval::RecallTable;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigests {
    pub kb: String,
    pub corpus: String,
    pub test: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track1Metrics {
    /// A link counts only when both span and entity id match a gold mention.
    pub linking: Prf,
    pub recognized: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track2Metrics {
    pub accuracy: f64,
    pub correct: usize,
    pub mentions: usize,
}

/// Evaluation results. Runtimes live in [`Timings`] so that reports of
/// identical runs stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    pub inputs: InputDigests,
    pub mode: Mode,
    pub eval_utterances: usize,
    pub retrieval: Option<RecallTable>,
    pub ner: Option<Prf>,
    pub track1: Option<Track1Metrics>,
    pub track2: Option<Track2Metrics>,
}

fn pct(x: f64) -> String {
    format!("{:>8.2}", 100.0 * x)
}

impl MetricsReport {
    pub fn new(config_fingerprint: String, inputs: InputDigests, mode: Mode, eval_utterances: usize) -> Self {
        MetricsReport {
            config_fingerprint,
            inputs,
            mode,
            eval_utterances,
            retrieval: None,
            ner: None,
            track1: None,
            track2: None,
        }
    }

    /// Plain-text tables: retrieval recall, recognition and linking.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config fingerprint: {}", self.config_fingerprint);
        let _ = writeln!(s, "kb digest:          {}", self.inputs.kb);
        let _ = writeln!(s, "corpus digest:      {}", self.inputs.corpus);
        if let Some(t) = &self.inputs.test {
            let _ = writeln!(s, "test digest:        {t}");
        }
        let _ = writeln!(s, "mode: {}  eval utterances: {}", self.mode, self.eval_utterances);
        if let Some(r) = &self.retrieval {
            let _ = writeln!(s, "\nCandidate retrieval ({} gold occurrences)", r.total);
            let _ = writeln!(s, "{}", RecallTable::header(&r.ks));
            let _ = writeln!(s, "{}", r.row("1", "bi-encoder"));
        }
        if let Some(p) = &self.ner {
            let _ = writeln!(s, "\nMention recognition");
            let _ = writeln!(s, "{:<34}| {:>8} | {:>8} | {:>8}", "Model", "P", "R", "F1");
            let _ = writeln!(s, "{:<34}| {} | {} | {}", "crf + knowledge", pct(p.precision), pct(p.recall), pct(p.f1));
        }
        if self.track1.is_some() || self.track2.is_some() {
            let _ = writeln!(s, "\nLinking");
            let _ = writeln!(s, "{:<34}| {:>8} | {:>8} | {:>8}", "Track", "P", "R", "F1/Acc");
        }
        if let Some(t) = &self.track1 {
            let p = &t.linking;
            let _ = writeln!(s, "{:<34}| {} | {} | {}", "track1 (span + id)", pct(p.precision), pct(p.recall), pct(p.f1));
            let _ = writeln!(s, "  recognized {}, dropped as ERROR {}", t.recognized, t.dropped);
        }
        if let Some(t) = &self.track2 {
            let _ = writeln!(s, "{:<34}| {:>8} | {:>8} | {}", "track2 (gold spans)", "", "", pct(t.accuracy));
            let _ = writeln!(s, "  {} of {} mentions linked to the gold id", t.correct, t.mentions);
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.render_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Wall-clock seconds per stage, in the order the stages ran.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

impl Timings {
    pub fn record(&mut self, stage: &str, seconds: f64) {
        self.stages.push(StageTiming {
            stage: stage.to_owned(),
            seconds,
        });
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = MetricsReport::new(
            "00ff".into(),
            InputDigests {
                kb: "a".into(),
                corpus: "b".into(),
                test: None,
            },
            Mode::Track1,
            3,
        );
        r.retrieval = Some(RecallTable {
            ks: vec![1, 16, 64],
            recall: vec![0.25, 0.5, 0.75],
            total: 4,
        });
        r.ner = Some(Prf::from_counts(2, 3, 4));
        r.track1 = Some(Track1Metrics {
            linking: Prf::from_counts(1, 2, 4),
            recognized: 3,
            dropped: 1,
        });
        r
    }

    #[test]
    fn same_metrics_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        sample().write(a.path(), "report").unwrap();
        sample().write(b.path(), "report").unwrap();
        for f in ["report.json", "report.txt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let back: MetricsReport = serde_json::from_slice(&fs::read(a.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn text_has_one_column_per_k_and_the_fingerprint() {
        let text = sample().render_text();
        assert!(text.contains("config fingerprint: 00ff"));
        let header = text.lines().find(|l| l.contains("Rec@")).unwrap();
        assert_eq!(header.matches("Rec@").count(), 3);
        assert!(header.contains("Rec@16") && !header.contains("Rec@32"));
        assert!(text.contains("50.00"));
    }
}
