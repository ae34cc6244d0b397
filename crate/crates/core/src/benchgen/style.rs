//! Style rewrites. Formal and informal prompts come from their own template
//! banks; informal ones additionally get seeded abbreviations and typos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates::bank;
use super::text::render_question;
use super::{QAExample, Style};
use crate::geoworld::FEATURES;

/// Words the noise pass never touches, besides anything containing a
/// digit or `<`, feature surface words and similarity subset words.
pub const PROTECTED_WORDS: [&str; 22] = [
    "region", "options", "national", "average", "avg", "more", "similar", "higher", "lower", "yes", "no", "most",
    "least", "candidate", "candidates", "weather", "food", "scene", "health", "leisure", "urban", "activity",
];

const ABBREVIATIONS: [(&str, &str); 8] = [
    ("you", "u"),
    ("are", "r"),
    ("please", "pls"),
    ("about", "abt"),
    ("because", "cuz"),
    ("with", "w"),
    ("before", "b4"),
    ("okay", "ok"),
];

fn is_protected(word: &str) -> bool {
    if word.chars().any(|c| c.is_ascii_digit() || c == '<' || c == '>') {
        return true;
    }
    let core: String = word.chars().filter(|c| c.is_alphanumeric() || *c == '_').collect();
    PROTECTED_WORDS.contains(&core.as_str()) || FEATURES.iter().any(|f| f.surface.split(' ').any(|w| w == core))
}

fn typo(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    // Letters only: keep attached punctuation in place.
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_alphabetic()).collect();
    let i = letters[rng.gen_range(0..letters.len() - 1)];
    let mut out = chars.clone();
    match rng.gen_range(0..3) {
        0 if chars[i + 1].is_ascii_alphabetic() => out.swap(i, i + 1),
        1 => {
            out.remove(i);
        }
        _ => out.insert(i, chars[i]),
    }
    out.into_iter().collect()
}

/// Seeded informal noise: lowercase, abbreviations, then one or two
/// character typos in unprotected words of four or more letters.
pub fn informal_noise(text: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<String> = text.to_lowercase().split(' ').map(str::to_string).collect();
    for w in words.iter_mut() {
        if let Some((_, short)) = ABBREVIATIONS.iter().find(|(long, _)| w == long) {
            if rng.gen_bool(0.5) {
                *w = short.to_string();
            }
        }
    }
    let eligible: Vec<usize> = (0..words.len())
        .filter(|&i| !is_protected(&words[i]) && words[i].chars().filter(|c| c.is_ascii_alphabetic()).count() >= 4)
        .collect();
    if !eligible.is_empty() {
        let n = rng.gen_range(1..=2).min(eligible.len());
        let picks = rand::seq::index::sample(&mut rng, eligible.len(), n);
        for p in picks {
            let i = eligible[p];
            words[i] = typo(&words[i], &mut rng);
        }
    }
    words.join(" ")
}

/// Rewrites `ex` into `style` with a seeded template variant of the same
/// answer form. Answer, options, region ids and generation record other
/// than the template choice are carried over unchanged.
pub fn augment_style(ex: &QAExample, style: Style, seed: u64) -> QAExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bank(ex.task, style, ex.meta.form).len();
    let mut out = ex.clone();
    out.style = style;
    out.meta.variant = rng.gen_range(0..n);
    out.meta.noise_seed = (style == Style::Informal).then(|| rng.gen());
    out.prompt = render_question(&out);
    out
}
