//! Answer metrics: ANLS and ROUGE-L.

/// Similarities below this are scored as zero.
pub const ANLS_THRESHOLD: f64 = 0.5;

fn normalize(text: &str) -> Vec<char> {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .collect()
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = (above + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = above;
        }
    }
    row[b.len()]
}

/// `1 - lev / max len` over lowercased, whitespace-collapsed strings.
pub fn normalized_similarity(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (normalize(prediction), normalize(gold));
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / longest as f64
}

/// Best thresholded similarity against any gold answer.
pub fn anls(prediction: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| normalized_similarity(prediction, g))
        .map(|s| if s >= ANLS_THRESHOLD { s } else { 0.0 })
        .fold(0.0, f64::max)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// LCS-based F1 over lowercased whitespace tokens.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (rouge_tokens(prediction), rouge_tokens(gold));
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Highest ROUGE-L against any gold answer.
pub fn rouge_l_multi(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| rouge_l(prediction, g)).fold(0.0, f64::max)
}
