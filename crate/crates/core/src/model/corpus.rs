//! Synthetic English-like corpus and the order-0 byte-entropy baseline.

use crate::numerics::Rng;

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "it", "that", "was", "he", "for", "on", "are", "with",
    "as", "his", "they", "be", "at", "one", "have", "this", "from", "or", "had", "by", "not", "but",
    "what", "some", "we", "can", "out", "other", "were", "all", "there", "when", "up", "use", "your",
    "how", "said", "an", "each", "she", "which", "do", "their", "time", "if", "will", "way", "about",
    "many", "then", "them", "would", "write", "like", "so", "these", "her", "long", "make", "thing",
    "see", "him", "two", "has", "look", "more", "day", "could", "go", "come", "did", "number", "sound",
    "no", "most", "people", "my", "over", "know", "water", "than", "call", "first", "who", "may",
    "down", "side", "been", "now", "find", "any", "new", "work", "part", "take", "get", "place",
    "made", "live", "where", "after", "back", "little", "only", "round", "man", "year", "came",
    "show", "every", "good", "me", "give", "our", "under", "name", "very", "through", "just", "form",
    "sentence", "great", "think", "say", "help", "low", "line", "differ", "turn", "cause", "much",
    "mean", "before", "move", "right", "boy", "old", "too", "same", "tell", "does", "set", "three",
    "want", "air", "well", "also", "play", "small", "end", "put", "home", "read", "hand", "port",
    "large", "spell", "add", "even", "land", "here", "must", "big", "high", "such", "follow", "act",
    "why", "ask", "men", "change", "went", "light", "kind", "off", "need", "house", "picture", "try",
    "us", "again", "animal", "point", "mother", "world", "near", "build", "self", "earth", "father",
    "head", "stand", "own", "page", "should", "country", "found", "answer", "school", "grow", "study",
    "still", "learn", "plant", "cover", "food", "sun", "four", "between", "state", "keep", "eye",
    "never", "last", "let", "thought", "city", "tree", "cross", "farm", "hard", "start", "might",
    "story", "saw", "far", "sea", "draw", "left", "late", "run", "while", "press", "close", "night",
    "real", "life", "few", "north", "open", "seem", "together", "next", "white", "children", "begin",
    "river", "morning", "winter", "garden", "letter", "mountain", "window", "summer", "evening",
];

/// Deterministic prose: Zipf-distributed words, sentences of 4 to 14 words
/// with occasional commas, and paragraph breaks.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let cdf: Vec<f64> = {
        let w: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
        let total: f64 = w.iter().sum();
        w.iter()
            .scan(0.0, |acc, x| {
                *acc += x / total;
                Some(*acc)
            })
            .collect()
    };
    let mut out = Vec::with_capacity(bytes + 32);
    let mut sentences = 0usize;
    while out.len() < bytes {
        let len = 4 + rng.below(11);
        for i in 0..len {
            let u = rng.uniform();
            let idx = cdf.partition_point(|&c| c < u).min(WORDS.len() - 1);
            let word = WORDS[idx].as_bytes();
            if i == 0 {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
            } else {
                out.extend_from_slice(word);
            }
            if i + 1 < len {
                if i > 1 && rng.below(8) == 0 {
                    out.push(b',');
                }
                out.push(b' ');
            }
        }
        out.push(b'.');
        sentences += 1;
        if rng.below(6) == 0 {
            out.push(b'\n');
        } else {
            out.push(b' ');
        }
        if sentences % 40 == 0 {
            out.push(b'\n');
        }
    }
    out.truncate(bytes);
    out
}

/// Order-0 byte entropy in nats: `−Σ_b p_b ln p_b` over byte frequencies.
pub fn order0_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Perplexity of the order-0 model, `exp(entropy)`.
pub fn order0_perplexity(bytes: &[u8]) -> f64 {
    order0_entropy(bytes).exp()
}
