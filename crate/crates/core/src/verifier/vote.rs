use crate::model::{Verdict, VerdictLabel, VoteHistogram};

use super::parse::ParseError;

/// Winning label of a histogram: most votes, ties resolved toward the lower
/// label (`Failure < PartialSuccess < Success`). `None` when empty.
pub fn winner(h: &VoteHistogram) -> Option<VerdictLabel> {
    let mut best: Option<(VerdictLabel, u32)> = None;
    for label in VerdictLabel::ALL {
        let c = h.count(label);
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((label, c));
        }
    }
    best.map(|(l, _)| l)
}

pub fn histogram(labels: &[VerdictLabel]) -> VoteHistogram {
    let mut h = VoteHistogram::default();
    for l in labels {
        h.add(*l);
    }
    h
}

/// Majority label over plain labels.
pub fn majority(labels: &[VerdictLabel]) -> Option<VerdictLabel> {
    winner(&histogram(labels))
}

/// Combines parsed samples. Unparseable samples are counted but do not vote.
/// Reasoning and feedback come from the first sample carrying the winner.
pub fn combine(samples: &[Result<Verdict, ParseError>]) -> Option<Verdict> {
    let mut h = VoteHistogram::default();
    for s in samples {
        match s {
            Ok(v) => h.add(v.label),
            Err(_) => h.unparseable += 1,
        }
    }
    let label = winner(&h)?;
    let mut v = samples.iter().flatten().find(|v| v.label == label).cloned().expect("winner came from a sample");
    v.votes = Some(h);
    v.usage = Default::default();
    Some(v)
}
