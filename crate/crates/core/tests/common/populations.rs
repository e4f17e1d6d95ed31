use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajverify::subset::TaskScoreRecord;

/// 3 domains x 3 shared templates x 10 tasks. Each domain has 9 successes.
pub fn synthetic_90() -> Vec<TaskScoreRecord> {
    let successes = [[3, 3, 3], [6, 3, 0], [1, 4, 4]];
    let mut out = Vec::new();
    for (d, dom) in ["alpha", "beta", "gamma"].iter().enumerate() {
        for (t, tpl) in ["t1", "t2", "t3"].iter().enumerate() {
            for k in 0..10 {
                let score = (k < successes[d][t]) as u8;
                out.push(TaskScoreRecord::new(format!("{dom}-{tpl}-{k:02}"), *dom, *tpl, score));
            }
        }
    }
    out
}

/// Domain sizes 466/210/234 with 135/44/70 successes (29/21/30 %), split
/// over templates of uneven size.
pub fn vwa_910(seed: u64) -> Vec<TaskScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (dom, n, succ, templates) in [("shopping", 466, 135, 40), ("reddit", 210, 44, 18), ("classifieds", 234, 70, 20)] {
        let mut scores: Vec<u8> = (0..n).map(|i| (i < succ) as u8).collect();
        scores.shuffle(&mut rng);
        for (i, score) in scores.into_iter().enumerate() {
            // uneven template sizes: template k gets roughly proportional to k+1
            let t = (((i * 7919) % n) as f64 / n as f64 * (templates * (templates + 1) / 2) as f64) as usize;
            let mut k = 0;
            while (k + 1) * (k + 2) / 2 <= t {
                k += 1;
            }
            out.push(TaskScoreRecord::new(format!("{dom}-{i:03}"), dom, format!("{dom}-tpl{k:02}"), score));
        }
    }
    out
}
