//! Word-level edit distance and WER accumulation.

/// Levenshtein distance over arbitrary equatable items.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut dist: Vec<usize> = (0..=b.len()).collect();
    for (i, av) in a.iter().enumerate() {
        let mut prev_diag = dist[0];
        dist[0] = i + 1;
        for j in 1..=b.len() {
            let sub = prev_diag + usize::from(&b[j - 1] != av);
            prev_diag = dist[j];
            dist[j] = sub.min(dist[j] + 1).min(dist[j - 1] + 1);
        }
    }
    dist[b.len()]
}

pub fn words(text: &str) -> Vec<&str> {
    text.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Word-level edit distance between two texts.
pub fn word_errors(hyp: &str, reference: &str) -> usize {
    edit_distance(&words(hyp), &words(reference))
}

/// Running WER tally: summed word errors over summed reference words.
#[derive(Debug, Default, Clone, Copy)]
pub struct WerTally {
    pub errors: usize,
    pub ref_words: usize,
}

impl WerTally {
    pub fn add(&mut self, hyp: &str, reference: &str) {
        self.errors += word_errors(hyp, reference);
        self.ref_words += words(reference).len();
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors as f64 / self.ref_words as f64
        }
    }
}
