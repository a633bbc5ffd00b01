//! PII anonymization: replaces emails, phone numbers, IBANs, credit card
//! numbers, and config-supplied national identification numbers with
//! synthetic equivalents of the same kind.
//!
//! Replacement is a pure function of (kind, original value, seed), so the
//! same value maps to the same synthetic string everywhere. Synthetic values
//! use reserved prefixes (the `.invalid` TLD, the +990 country code, the ZZ
//! IBAN country, the 9999 card prefix) that the matchers skip, which makes
//! the pass idempotent: running it on its own output changes nothing.

use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::dedup::fnv1a_64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiiKind {
    Email,
    Phone,
    Iban,
    CreditCard,
    NationalId,
}

/// Checksum validator attached to a national-id rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Checksum {
    #[default]
    None,
    Luhn,
    Mod97,
}

/// A config-supplied national identification number pattern. None are
/// hardcoded: formats vary by jurisdiction and shipping wrong validators is
/// worse than none.
#[derive(Debug, Clone)]
pub struct NationalIdRule {
    pub name: String,
    pub pattern: Regex,
    pub checksum: Checksum,
}

#[derive(Debug, Clone, Default)]
pub struct PiiRules {
    pub seed: u64,
    pub national_ids: Vec<NationalIdRule>,
}

#[derive(Debug, Deserialize)]
struct RawNationalIdRule {
    name: String,
    pattern: String,
    #[serde(default)]
    checksum: Checksum,
}

#[derive(Debug, Deserialize)]
struct NationalIdFile {
    #[serde(default, rename = "rule")]
    rules: Vec<RawNationalIdRule>,
}

impl PiiRules {
    pub fn new(seed: u64) -> Self {
        PiiRules {
            seed,
            national_ids: Vec::new(),
        }
    }

    /// Loads national-id rules from a TOML file of `[[rule]]` tables with
    /// `name`, `pattern` and optional `checksum` keys.
    pub fn load_national_ids(&mut self, path: &Path) -> Result<usize> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NationalIdFile = toml::from_str(&content)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut added = 0;
        for raw in file.rules {
            let pattern = Regex::new(&raw.pattern).map_err(|e| {
                Error::Config(format!("{}: rule {}: {e}", path.display(), raw.name))
            })?;
            self.national_ids.push(NationalIdRule {
                name: raw.name,
                pattern,
                checksum: raw.checksum,
            });
            added += 1;
        }
        Ok(added)
    }
}

/// A replacement that was made, with its span in the output text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub kind: PiiKind,
    pub start: usize,
    pub end: usize,
}

pub fn luhn_valid(digits: &str) -> bool {
    let ds: Vec<u32> = digits.chars().filter_map(|c| c.to_digit(10)).collect();
    if ds.len() != digits.chars().count() || ds.is_empty() {
        return false;
    }
    let sum: u32 = ds
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let doubled = d * 2;
                if doubled > 9 {
                    doubled - 9
                } else {
                    doubled
                }
            } else {
                d
            }
        })
        .sum();
    sum % 10 == 0
}

/// ISO 7064 mod-97 remainder of an IBAN-style string after moving the first
/// four characters to the end and expanding letters to numbers.
fn iban_mod97(compact: &str) -> Option<u64> {
    if compact.len() < 5 {
        return None;
    }
    let rearranged: String = format!("{}{}", &compact[4..], &compact[..4]);
    let mut remainder: u64 = 0;
    for c in rearranged.chars() {
        let v = match c {
            '0'..='9' => c as u64 - '0' as u64,
            'A'..='Z' => c as u64 - 'A' as u64 + 10,
            _ => return None,
        };
        if v >= 10 {
            remainder = (remainder * 100 + v) % 97;
        } else {
            remainder = (remainder * 10 + v) % 97;
        }
    }
    Some(remainder)
}

/// Validates an IBAN candidate: strips spaces, checks shape and length, and
/// requires a mod-97 remainder of 1.
pub fn iban_valid(s: &str) -> bool {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_uppercase();
    if compact.len() < 15 || compact.len() > 34 {
        return false;
    }
    let chars: Vec<char> = compact.chars().collect();
    if !(chars[0].is_ascii_alphabetic()
        && chars[1].is_ascii_alphabetic()
        && chars[2].is_ascii_digit()
        && chars[3].is_ascii_digit())
    {
        return false;
    }
    iban_mod97(&compact) == Some(1)
}

fn email_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,24}").unwrap()
    })
}

fn iban_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Uppercase continuation only, so a following lowercase word is never
    // swallowed into the candidate.
    RE.get_or_init(|| Regex::new(r"[A-Z]{2}[0-9]{2}(?: ?[A-Z0-9]){11,30}").unwrap())
}

fn digit_run_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Candidate digit runs with optional separators; validators narrow the
    // match down to actual card numbers or phone numbers.
    RE.get_or_init(|| Regex::new(r"\+?[0-9][0-9 ().\-]{4,}[0-9]").unwrap())
}

fn digits_of(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_digit()).collect()
}

/// True when the match boundaries sit inside a larger alphanumeric run, in
/// which case the candidate is part of an identifier and not free-standing
/// PII.
fn embedded(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    before.is_some_and(|c| c.is_alphanumeric()) || after.is_some_and(|c| c.is_alphanumeric())
}

const RESERVED_PHONE_PREFIX: &str = "990";
const RESERVED_CARD_PREFIX: &str = "9999";
const RESERVED_IBAN_COUNTRY: &str = "ZZ";

fn email_reserved(s: &str) -> bool {
    let lower = s.to_lowercase();
    lower.ends_with(".invalid") || lower.ends_with(".test")
}

struct Claim {
    start: usize,
    end: usize,
    kind: PiiKind,
    replacement: String,
}

fn overlaps(claims: &[Claim], start: usize, end: usize) -> bool {
    claims.iter().any(|c| start < c.end && c.start < end)
}

fn synth_rng(kind: &str, original: &str, seed: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(kind.len() + original.len() + 1);
    key.extend_from_slice(kind.as_bytes());
    key.push(0);
    key.extend_from_slice(original.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a_64(&key) ^ seed.rotate_left(17))
}

const FIRST_NAMES: &[&str] = &[
    "alex", "sam", "kim", "toma", "mika", "lena", "juris", "eva", "otto", "nora", "ivo", "mara",
];
const LAST_NAMES: &[&str] = &[
    "berg", "lapa", "koval", "novak", "saar", "vik", "petrov", "liepa", "kron", "mets", "ozols",
    "kalns",
];

fn synth_email(original: &str, seed: u64) -> String {
    let mut rng = synth_rng("email", original, seed);
    let first = FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())];
    let last = LAST_NAMES[rng.random_range(0..LAST_NAMES.len())];
    let num: u32 = rng.random_range(10..100);
    format!("{first}.{last}{num}@anon.invalid")
}

fn synth_phone(original: &str, seed: u64) -> String {
    let mut rng = synth_rng("phone", original, seed);
    let a: u32 = rng.random_range(100..1000);
    let b: u32 = rng.random_range(1000..10000);
    format!("+{RESERVED_PHONE_PREFIX} {a} {b}")
}

fn synth_iban(original: &str, seed: u64) -> String {
    let mut rng = synth_rng("iban", original, seed);
    let mut bban = String::with_capacity(16);
    for _ in 0..4 {
        bban.push((b'A' + rng.random_range(0..26u8)) as char);
    }
    for _ in 0..12 {
        bban.push((b'0' + rng.random_range(0..10u8)) as char);
    }
    // Standard check-digit construction: remainder of BBAN + country + "00".
    let probe = format!("{RESERVED_IBAN_COUNTRY}00{bban}");
    let r = iban_mod97(&probe).expect("synthetic BBAN is alphanumeric");
    let check = 98 - r;
    format!("{RESERVED_IBAN_COUNTRY}{check:02}{bban}")
}

fn synth_card(original: &str, seed: u64) -> String {
    let mut rng = synth_rng("card", original, seed);
    let mut digits = String::from(RESERVED_CARD_PREFIX);
    for _ in 0..11 {
        digits.push((b'0' + rng.random_range(0..10u8)) as char);
    }
    // Luhn check digit over the 15-digit payload.
    let payload: Vec<u32> = digits.chars().map(|c| c.to_digit(10).unwrap()).collect();
    let sum: u32 = payload
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 0 {
                let doubled = d * 2;
                if doubled > 9 {
                    doubled - 9
                } else {
                    doubled
                }
            } else {
                d
            }
        })
        .sum();
    let check = (10 - sum % 10) % 10;
    digits.push(char::from_digit(check, 10).unwrap());
    digits
}

fn shape_preserved(original: &str, rng: &mut ChaCha8Rng) -> String {
    original
        .chars()
        .map(|c| {
            if c.is_ascii_digit() {
                (b'0' + rng.random_range(0..10u8)) as char
            } else if c.is_ascii_uppercase() {
                (b'A' + rng.random_range(0..26u8)) as char
            } else if c.is_ascii_lowercase() {
                (b'a' + rng.random_range(0..26u8)) as char
            } else {
                c
            }
        })
        .collect()
}

fn matches_any_rule(candidate: &str, rules: &PiiRules) -> bool {
    if email_re()
        .find_iter(candidate)
        .any(|m| !email_reserved(m.as_str()))
    {
        return true;
    }
    if iban_re().find_iter(candidate).any(|m| {
        iban_valid(m.as_str())
            && !digits_of(m.as_str()).is_empty()
            && !m.as_str().to_uppercase().starts_with(RESERVED_IBAN_COUNTRY)
    }) {
        return true;
    }
    for m in digit_run_re().find_iter(candidate) {
        let ds = digits_of(m.as_str());
        if (13..=19).contains(&ds.len()) && luhn_valid(&ds) && !ds.starts_with(RESERVED_CARD_PREFIX)
        {
            return true;
        }
        if (7..=15).contains(&ds.len()) && !ds.starts_with(RESERVED_PHONE_PREFIX) {
            return true;
        }
    }
    for rule in &rules.national_ids {
        for m in rule.pattern.find_iter(candidate) {
            if national_checksum_ok(m.as_str(), rule.checksum) {
                return true;
            }
        }
    }
    false
}

fn national_checksum_ok(value: &str, checksum: Checksum) -> bool {
    match checksum {
        Checksum::None => true,
        Checksum::Luhn => luhn_valid(&digits_of(value)),
        Checksum::Mod97 => {
            let ds = digits_of(value);
            !ds.is_empty() && ds.parse::<u128>().map(|n| n % 97 == 1).unwrap_or(false)
        }
    }
}

fn synth_national(original: &str, rules: &PiiRules) -> String {
    let mut rng = synth_rng("national", original, rules.seed);
    for _ in 0..64 {
        let candidate = shape_preserved(original, &mut rng);
        if !matches_any_rule(&candidate, rules) {
            return candidate;
        }
    }
    // Letters flank the hex digits so no digit-run matcher can fire.
    format!("[id-x{:08x}a]", rng.random::<u32>())
}

/// Scans the text with all matchers, most specific first, and replaces every
/// validated match. Returns the new text and the replacement spans, indexed
/// into the output. Text outside the spans is byte-identical to the input.
pub fn anonymize_text(text: &str, rules: &PiiRules) -> (String, Vec<Replacement>) {
    let mut claims: Vec<Claim> = Vec::new();

    for m in email_re().find_iter(text) {
        if email_reserved(m.as_str()) || overlaps(&claims, m.start(), m.end()) {
            continue;
        }
        claims.push(Claim {
            start: m.start(),
            end: m.end(),
            kind: PiiKind::Email,
            replacement: synth_email(m.as_str(), rules.seed),
        });
    }

    for m in iban_re().find_iter(text) {
        if embedded(text, m.start(), m.end()) || overlaps(&claims, m.start(), m.end()) {
            continue;
        }
        let compact: String = m.as_str().chars().filter(|c| !c.is_whitespace()).collect();
        if compact.to_uppercase().starts_with(RESERVED_IBAN_COUNTRY) || !iban_valid(m.as_str()) {
            continue;
        }
        claims.push(Claim {
            start: m.start(),
            end: m.end(),
            kind: PiiKind::Iban,
            replacement: synth_iban(&compact.to_uppercase(), rules.seed),
        });
    }

    // Credit cards before phones: both match digit runs, cards are stricter.
    for m in digit_run_re().find_iter(text) {
        if embedded(text, m.start(), m.end()) || overlaps(&claims, m.start(), m.end()) {
            continue;
        }
        let ds = digits_of(m.as_str());
        if (13..=19).contains(&ds.len())
            && luhn_valid(&ds)
            && !ds.starts_with(RESERVED_CARD_PREFIX)
        {
            claims.push(Claim {
                start: m.start(),
                end: m.end(),
                kind: PiiKind::CreditCard,
                replacement: synth_card(&ds, rules.seed),
            });
        }
    }

    for rule in &rules.national_ids {
        for m in rule.pattern.find_iter(text) {
            if overlaps(&claims, m.start(), m.end()) {
                continue;
            }
            if !national_checksum_ok(m.as_str(), rule.checksum) {
                continue;
            }
            claims.push(Claim {
                start: m.start(),
                end: m.end(),
                kind: PiiKind::NationalId,
                replacement: synth_national(m.as_str(), rules),
            });
        }
    }

    for m in digit_run_re().find_iter(text) {
        if embedded(text, m.start(), m.end()) || overlaps(&claims, m.start(), m.end()) {
            continue;
        }
        let ds = digits_of(m.as_str());
        if !(7..=15).contains(&ds.len()) || ds.starts_with(RESERVED_PHONE_PREFIX) {
            continue;
        }
        claims.push(Claim {
            start: m.start(),
            end: m.end(),
            kind: PiiKind::Phone,
            replacement: synth_phone(&ds, rules.seed),
        });
    }

    if claims.is_empty() {
        return (text.to_string(), Vec::new());
    }
    claims.sort_by_key(|c| c.start);

    let mut out = String::with_capacity(text.len());
    let mut replacements = Vec::with_capacity(claims.len());
    let mut cursor = 0usize;
    for claim in &claims {
        out.push_str(&text[cursor..claim.start]);
        let start = out.len();
        out.push_str(&claim.replacement);
        replacements.push(Replacement {
            kind: claim.kind,
            start,
            end: out.len(),
        });
        cursor = claim.end;
    }
    out.push_str(&text[cursor..]);
    (out, replacements)
}

/// Anonymizes one document, returning the rewritten document and the spans.
pub fn anonymize_pii(doc: Document, rules: &PiiRules) -> (Document, Vec<Replacement>) {
    let (text, replacements) = anonymize_text(&doc.text, rules);
    let mut doc = doc;
    doc.text = text;
    (doc, replacements)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luhn_accepts_known_test_numbers() {
        assert!(luhn_valid("4111111111111111"));
        assert!(!luhn_valid("4111111111111112"));
    }

    #[test]
    fn iban_mod97_validation() {
        assert!(iban_valid("DE89 3704 0044 0532 0130 00"));
        assert!(iban_valid("GB29 NWBK 6016 1331 9268 19"));
        assert!(!iban_valid("DE00 0000 0000 0000 0000 00"));
    }

    #[test]
    fn email_is_replaced() {
        let rules = PiiRules::new(7);
        let (out, reps) = anonymize_text("contact me at x@y.example today", &rules);
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].kind, PiiKind::Email);
        assert!(!out.contains("x@y.example"));
        assert!(out.starts_with("contact me at "));
        assert!(out.ends_with(" today"));
        // Span indexes into the output text.
        assert!(out[reps[0].start..reps[0].end].contains("@anon.invalid"));
    }

    #[test]
    fn invalid_iban_left_alone() {
        let rules = PiiRules::new(7);
        let text = "ref LV00 0000 1111 2222 3333 4 end";
        let (out, reps) = anonymize_text(text, &rules);
        assert!(reps.is_empty());
        assert_eq!(out, text);
    }

    #[test]
    fn same_value_same_replacement() {
        let rules = PiiRules::new(7);
        let (out, reps) =
            anonymize_text("first a.b@mail.example then again a.b@mail.example", &rules);
        assert_eq!(reps.len(), 2);
        let first = &out[reps[0].start..reps[0].end];
        let second = &out[reps[1].start..reps[1].end];
        assert_eq!(first, second);
    }

    #[test]
    fn different_seeds_different_replacements() {
        let (a, _) = anonymize_text("mail me: x@y.example", &PiiRules::new(1));
        let (b, _) = anonymize_text("mail me: x@y.example", &PiiRules::new(2));
        assert_ne!(a, b);
    }

    #[test]
    fn credit_card_with_luhn_replaced() {
        let rules = PiiRules::new(7);
        let (out, reps) = anonymize_text("card: 4111 1111 1111 1111.", &rules);
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].kind, PiiKind::CreditCard);
        let synthetic = digits_of(&out[reps[0].start..reps[0].end]);
        assert!(synthetic.starts_with("9999"));
        assert!(luhn_valid(&synthetic));
    }

    #[test]
    fn phone_needs_seven_digits() {
        let rules = PiiRules::new(7);
        let (out, reps) = anonymize_text("year 2024 and code 12345", &rules);
        assert!(reps.is_empty());
        assert_eq!(out, "year 2024 and code 12345");
        let (_, reps) = anonymize_text("call +371 2612 3456 now", &rules);
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].kind, PiiKind::Phone);
    }

    #[test]
    fn synthetic_iban_passes_mod97() {
        let s = synth_iban("DE89370400440532013000", 7);
        assert!(s.starts_with("ZZ"));
        assert_eq!(iban_mod97(&s), Some(1));
    }

    #[test]
    fn anonymize_is_idempotent() {
        let rules = PiiRules::new(42);
        let text = "mail a@b.example, card 4111 1111 1111 1111, iban DE89 3704 0044 0532 0130 00, call +371 26123456";
        let (once, reps) = anonymize_text(text, &rules);
        assert_eq!(reps.len(), 4);
        let (twice, reps2) = anonymize_text(&once, &rules);
        assert!(reps2.is_empty(), "second pass found: {reps2:?}");
        assert_eq!(once, twice);
    }

    #[test]
    fn national_id_rules_from_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nids.toml");
        std::fs::write(
            &path,
            r#"
[[rule]]
name = "test-pc"
pattern = '\b[0-9]{6}-[0-9]{5}\b'
checksum = "none"
"#,
        )
        .unwrap();
        let mut rules = PiiRules::new(9);
        assert_eq!(rules.load_national_ids(&path).unwrap(), 1);
        let (out, reps) = anonymize_text("pk 123456-12345 end", &rules);
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].kind, PiiKind::NationalId);
        assert!(!out.contains("123456-12345"));
        // Idempotent even for shape-preserved national ids.
        let (_, reps2) = anonymize_text(&out, &rules);
        assert!(reps2.is_empty(), "second pass found: {reps2:?}");
    }
}
