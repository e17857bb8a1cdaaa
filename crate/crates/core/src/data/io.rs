//! Line-oriented text formats.
//!
//! Dataset: one utterance per line, `label<TAB>v1,v2,...,vD`, floats written
//! with 17 significant digits so they parse back bit-exactly. The utterance id
//! is the 0-based line number.
//!
//! Trials: `enroll_id<TAB>test_id<TAB>{0|1}`, 1 marking a target trial.

use std::io::{BufRead, Write};

use super::{SpeakerDataset, Trial, TrialList, Utterance};
use crate::error::{Error, Result};

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

pub fn write_dataset<W: Write>(dataset: &SpeakerDataset, mut out: W) -> Result<()> {
    let mut line = String::new();
    for u in &dataset.utterances {
        line.clear();
        line.push_str(&u.label.to_string());
        line.push('\t');
        for (i, v) in u.features.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io_err)?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Labels must be dense and
/// evenly represented; speaker ids are set to the labels.
pub fn read_dataset<R: BufRead>(input: R) -> Result<SpeakerDataset> {
    let mut utterances = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(format!("dataset line {}: {what}", lineno + 1));
        let (label, values) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let label: usize = label.parse().map_err(|_| bad("bad label"))?;
        let features = values
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad feature value")))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = utterances.first() {
            let first: &Utterance = first;
            if first.features.len() != features.len() {
                return Err(bad("feature dimension differs from the first line"));
            }
        }
        utterances.push(Utterance { features, label });
    }
    if utterances.is_empty() {
        return Err(Error::data("dataset is empty"));
    }
    let num_speakers = utterances.iter().map(|u| u.label).max().unwrap() + 1;
    let mut counts = vec![0usize; num_speakers];
    for u in &utterances {
        counts[u.label] += 1;
    }
    let per = counts[0];
    if counts.iter().any(|&c| c != per) {
        return Err(Error::data(
            "labels are not dense with an equal number of utterances each",
        ));
    }
    Ok(SpeakerDataset {
        utterances,
        num_speakers,
        utterances_per_speaker: per,
        speaker_ids: (0..num_speakers).collect(),
    })
}

pub fn write_trials<W: Write>(trials: &TrialList, mut out: W) -> Result<()> {
    for t in &trials.trials {
        writeln!(out, "{}\t{}\t{}", t.enroll, t.test, u8::from(t.is_target)).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_trials<R: BufRead>(input: R) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::data(format!("trial line {}: expected enroll<TAB>test<TAB>0|1", lineno + 1));
        let mut parts = line.split('\t');
        let enroll = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let test = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let is_target = match parts.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        trials.push(Trial {
            enroll,
            test,
            is_target,
        });
    }
    Ok(TrialList { trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_universe, make_trials, sample_dataset};
    use proptest::prelude::*;

    #[test]
    fn dataset_text_round_trip_is_exact() {
        let u = build_universe(5, 3, 4, 0.7, 3).unwrap();
        let d = sample_dataset(&u, &[0, 1, 2, 3, 4], 3, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.utterances, d.utterances);
        let first = String::from_utf8(buf).unwrap();
        assert!(first.starts_with("0\t"));
        let t = make_trials(&d, 4, 4, 0).unwrap();
        let mut tb = Vec::new();
        write_trials(&t, &mut tb).unwrap();
        assert_eq!(read_trials(tb.as_slice()).unwrap(), t);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(read_dataset("0\t1.0,2.0\n1\t3.0\n".as_bytes()).is_err());
        assert!(read_dataset("0 1.0\n".as_bytes()).is_err());
        assert!(read_dataset("0\t1.0\n0\t2.0\n1\t3.0\n".as_bytes()).is_err());
        assert!(read_dataset("".as_bytes()).is_err());
        assert!(read_trials("1\t2\t3\n".as_bytes()).is_err());
        assert!(read_trials("1\t2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let text = format!("{v:.16e}");
            prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
