//! URL-level filtering: drops documents from disallowed or structurally
//! suspicious web sources before any content-level processing runs.
//!
//! Three rules apply in order: subdomain depth, blacklisted registrable
//! domain, and keyword substring match over the full URL. The first matching
//! rule wins. Documents without a URL pass (they cannot be URL-filtered).

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Reason code attached to every verdict. `Pass` if and only if kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UrlRule {
    TooManySubdomains,
    BlacklistedDomain,
    KeywordMatch,
    /// The URL could not be parsed at all; dropped like a blacklisted
    /// domain but reported distinctly in logs.
    Unparseable,
    Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub keep: bool,
    pub rule: UrlRule,
}

impl Verdict {
    fn drop(rule: UrlRule) -> Self {
        Verdict { keep: false, rule }
    }

    fn pass() -> Self {
        Verdict {
            keep: true,
            rule: UrlRule::Pass,
        }
    }
}

/// Rule tables for the URL filter. Immutable after load; filtering is
/// embarrassingly parallel per document.
#[derive(Debug, Clone)]
pub struct UrlRuleSet {
    blacklist_domains: BTreeSet<String>,
    keyword_blocklist: BTreeSet<String>,
    max_subdomains: usize,
}

impl Default for UrlRuleSet {
    fn default() -> Self {
        UrlRuleSet {
            blacklist_domains: BTreeSet::new(),
            keyword_blocklist: BTreeSet::new(),
            max_subdomains: 4,
        }
    }
}

impl UrlRuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_subdomains(mut self, max: usize) -> Result<Self> {
        if max < 1 {
            return Err(Error::Config("max_subdomains must be >= 1".into()));
        }
        self.max_subdomains = max;
        Ok(self)
    }

    /// Adds one domain to the blacklist, normalized to lowercase with any
    /// scheme, path, or port stripped.
    pub fn add_blacklist_domain(&mut self, domain: &str) {
        if let Some(host) = parse_host(domain).map(|h| h.host) {
            self.blacklist_domains.insert(host);
        }
    }

    pub fn add_keyword(&mut self, keyword: &str) {
        let k = keyword.trim().to_lowercase();
        if !k.is_empty() {
            self.keyword_blocklist.insert(k);
        }
    }

    /// Loads a line-oriented plain-text blacklist file; `#` starts a comment.
    pub fn load_blacklist_file(&mut self, path: &Path) -> Result<usize> {
        let mut added = 0;
        for line in read_list_file(path)? {
            self.add_blacklist_domain(&line);
            added += 1;
        }
        Ok(added)
    }

    pub fn load_keyword_file(&mut self, path: &Path) -> Result<usize> {
        let mut added = 0;
        for line in read_list_file(path)? {
            self.add_keyword(&line);
            added += 1;
        }
        Ok(added)
    }

    pub fn max_subdomains(&self) -> usize {
        self.max_subdomains
    }
}

fn read_list_file(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Host name split into its parts, as extracted by [`parse_host`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostInfo {
    /// Lowercase authority without userinfo or port.
    pub host: String,
    /// The public suffix plus one label, per the bundled snapshot; without
    /// a snapshot match the last two labels.
    pub registrable: String,
    /// Number of dot-separated labels left of the registrable domain.
    pub subdomain_count: usize,
}

fn suffix_set() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        include_str!("assets/public_suffix.txt")
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect()
    })
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_alphanumeric() || c == '-' || c == '_')
}

/// Extracts the lowercase host from a URL and counts its subdomain labels.
/// Accepts scheme-less input. Returns `None` when no plausible host can be
/// extracted.
pub fn parse_host(url: &str) -> Option<HostInfo> {
    let trimmed = url.trim();
    if trimmed.is_empty() {
        return None;
    }
    let rest = match trimmed.find("://") {
        Some(pos) if trimmed[..pos].chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c)) => {
            &trimmed[pos + 3..]
        }
        _ => trimmed.strip_prefix("//").unwrap_or(trimmed),
    };
    let authority = rest
        .split(['/', '?', '#'])
        .next()
        .unwrap_or("");
    let authority = authority.rsplit('@').next().unwrap_or(authority);
    // Strip a trailing :port if present.
    let host_part = match authority.rfind(':') {
        Some(pos) if authority[pos + 1..].chars().all(|c| c.is_ascii_digit()) => {
            &authority[..pos]
        }
        _ => authority,
    };
    let host = host_part.trim_end_matches('.').to_lowercase();
    if host.is_empty() {
        return None;
    }
    let labels: Vec<&str> = host.split('.').collect();
    if !labels.iter().all(|l| valid_label(l)) {
        return None;
    }
    let suffixes = suffix_set();
    // Longest public suffix match wins.
    let mut suffix_labels = 0usize;
    for take in (1..labels.len()).rev() {
        let candidate = labels[labels.len() - take..].join(".");
        if suffixes.contains(candidate.as_str()) {
            suffix_labels = take;
            break;
        }
    }
    if suffix_labels == 0 {
        // No snapshot match: treat the last two labels as registrable.
        suffix_labels = 1.min(labels.len().saturating_sub(1));
    }
    let registrable_labels = (suffix_labels + 1).min(labels.len());
    let registrable = labels[labels.len() - registrable_labels..].join(".");
    let subdomain_count = labels.len() - registrable_labels;
    Some(HostInfo {
        host,
        registrable,
        subdomain_count,
    })
}

/// Applies the rule set to one document. Rules fire in the listed order:
/// subdomain depth, blacklist, keyword; the first match decides.
pub fn apply_url_filter(doc: &Document, rules: &UrlRuleSet) -> Verdict {
    let url = match &doc.url {
        Some(u) => u,
        None => return Verdict::pass(),
    };
    let info = match parse_host(url) {
        Some(i) => i,
        None => return Verdict::drop(UrlRule::Unparseable),
    };
    if info.subdomain_count > rules.max_subdomains {
        return Verdict::drop(UrlRule::TooManySubdomains);
    }
    if rules.blacklist_domains.contains(&info.registrable)
        || rules.blacklist_domains.contains(&info.host)
    {
        return Verdict::drop(UrlRule::BlacklistedDomain);
    }
    if !rules.keyword_blocklist.is_empty() {
        let lower = url.to_lowercase();
        if rules.keyword_blocklist.iter().any(|k| lower.contains(k)) {
            return Verdict::drop(UrlRule::KeywordMatch);
        }
    }
    Verdict::pass()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_with_url(url: &str) -> Document {
        Document::new("d", "xx", "test", "body").with_url(url)
    }

    #[test]
    fn subdomain_counting() {
        assert_eq!(
            parse_host("https://a.b.c.d.e.example.com/x").unwrap().subdomain_count,
            5
        );
        assert_eq!(parse_host("http://example.com").unwrap().subdomain_count, 0);
        assert_eq!(
            parse_host("https://www.example.com").unwrap().subdomain_count,
            1
        );
    }

    #[test]
    fn second_level_suffixes_counted_against_registrable() {
        let info = parse_host("https://news.bbc.co.uk").unwrap();
        assert_eq!(info.registrable, "bbc.co.uk");
        assert_eq!(info.subdomain_count, 1);
    }

    #[test]
    fn scheme_less_and_port_urls_parse() {
        let info = parse_host("a.b.c.d.e.example.com").unwrap();
        assert_eq!(info.subdomain_count, 5);
        let info = parse_host("http://example.com:8080/path").unwrap();
        assert_eq!(info.host, "example.com");
    }

    #[test]
    fn max_subdomains_boundary() {
        let rules = UrlRuleSet::new();
        // Four subdomains is kept, five is dropped.
        let four = doc_with_url("https://a.b.c.d.example.com");
        assert!(apply_url_filter(&four, &rules).keep);
        let five = doc_with_url("https://a.b.c.d.e.example.com");
        let v = apply_url_filter(&five, &rules);
        assert!(!v.keep);
        assert_eq!(v.rule, UrlRule::TooManySubdomains);
    }

    #[test]
    fn empty_rules_keep_plain_domain() {
        let rules = UrlRuleSet::new();
        let v = apply_url_filter(&doc_with_url("example.com"), &rules);
        assert!(v.keep);
        assert_eq!(v.rule, UrlRule::Pass);
    }

    #[test]
    fn blacklisted_registrable_domain_drops() {
        let mut rules = UrlRuleSet::new();
        rules.add_blacklist_domain("spam.example");
        let v = apply_url_filter(&doc_with_url("https://www.spam.example/page"), &rules);
        assert_eq!(v.rule, UrlRule::BlacklistedDomain);
    }

    #[test]
    fn keyword_matches_anywhere_in_url() {
        let mut rules = UrlRuleSet::new();
        rules.add_keyword("badword");
        let v = apply_url_filter(&doc_with_url("https://ok.example/with-BADWORD-inside"), &rules);
        assert!(!v.keep);
        assert_eq!(v.rule, UrlRule::KeywordMatch);
    }

    #[test]
    fn document_without_url_passes() {
        let rules = UrlRuleSet::new();
        let doc = Document::new("d", "xx", "test", "body");
        assert!(apply_url_filter(&doc, &rules).keep);
    }

    #[test]
    fn unparseable_url_drops_distinctly() {
        let rules = UrlRuleSet::new();
        let v = apply_url_filter(&doc_with_url("http://   "), &rules);
        assert_eq!(v.rule, UrlRule::Unparseable);
    }

    #[test]
    fn blacklist_monotonicity() {
        let url = "https://www.example.com/a";
        let mut rules = UrlRuleSet::new();
        let before = apply_url_filter(&doc_with_url(url), &rules);
        assert!(before.keep);
        rules.add_blacklist_domain("unrelated.org");
        let after = apply_url_filter(&doc_with_url(url), &rules);
        assert_eq!(before, after);
        rules.add_blacklist_domain("example.com");
        assert!(!apply_url_filter(&doc_with_url(url), &rules).keep);
    }

    #[test]
    fn list_files_support_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bl.txt");
        std::fs::write(&path, "# comment\nspam.example  # trailing\n\nmore.example\n").unwrap();
        let mut rules = UrlRuleSet::new();
        assert_eq!(rules.load_blacklist_file(&path).unwrap(), 2);
    }
}
