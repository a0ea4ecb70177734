//! Two-stage IPv4 blacklist lookup.
//!
//! Stage one is a 512-entry bitmap keyed by the top 9 address bits. Stage
//! two keys each hit bucket by the next 15 bits; an entry either covers the
//! whole /24 or lists individual hosts by their last 8 bits, which are
//! compared in the same second cycle. Prefixes between /9 and /23 are
//! expanded into /24 entries, /25 to /31 into hosts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shortest prefix the expansion accepts.
pub const MIN_PREFIX: u8 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    pub net: u32,
    pub prefix: u8,
}

impl Rule {
    pub fn host(ip: u32) -> Self {
        Rule {
            net: ip,
            prefix: 32,
        }
    }

    pub fn mask(&self) -> u32 {
        if self.prefix == 0 {
            0
        } else {
            u32::MAX << (32 - self.prefix)
        }
    }

    pub fn contains(&self, ip: u32) -> bool {
        ip & self.mask() == self.net
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.prefix == 32 {
            write!(f, "{}", Ipv4Addr::from(self.net))
        } else {
            write!(f, "{}/{}", Ipv4Addr::from(self.net), self.prefix)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (addr, prefix) = match s.split_once('/') {
            Some((a, p)) => (
                a,
                p.parse::<u8>()
                    .map_err(|_| format!("bad prefix length in '{s}'"))?,
            ),
            None => (s, 32),
        };
        let ip: Ipv4Addr = addr
            .parse()
            .map_err(|_| format!("bad IPv4 address '{addr}'"))?;
        if prefix > 32 {
            return Err(format!("prefix /{prefix} longer than 32"));
        }
        if prefix < MIN_PREFIX {
            return Err(format!("prefix /{prefix} shorter than /{MIN_PREFIX}"));
        }
        let rule = Rule {
            net: u32::from(ip),
            prefix,
        };
        if rule.net & !rule.mask() != 0 {
            return Err(format!("'{s}' has host bits set"));
        }
        Ok(rule)
    }
}

/// Parses a drop list. Accepts bare `a.b.c.d[/n]` lines and pf-style
/// `block ... from <addr> to any` lines; `#` starts a comment.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, RuleError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let addr = match tokens.iter().position(|t| *t == "from") {
            Some(p) => tokens.get(p + 1).copied(),
            None if tokens.len() == 1 => Some(tokens[0]),
            None => None,
        };
        let addr = addr.ok_or_else(|| RuleError::Parse {
            line: i + 1,
            msg: format!("no address in '{line}'"),
        })?;
        let rule = addr.parse::<Rule>().map_err(|msg| RuleError::Parse {
            line: i + 1,
            msg,
        })?;
        rules.push(rule);
    }
    Ok(rules)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Stage2Entry {
    whole: bool,
    hosts: [u64; 4],
}

impl Stage2Entry {
    fn add_host(&mut self, low: u8) {
        self.hosts[(low >> 6) as usize] |= 1 << (low & 63);
    }

    fn matches(&self, low: u8) -> bool {
        self.whole || self.hosts[(low >> 6) as usize] & (1 << (low & 63)) != 0
    }
}

#[derive(Clone, Debug)]
pub struct BlacklistMatcher {
    stage1: [u64; 8],
    stage2: Vec<HashMap<u16, Stage2Entry>>,
    entries: usize,
    rules: usize,
}

impl Default for BlacklistMatcher {
    fn default() -> Self {
        BlacklistMatcher {
            stage1: [0; 8],
            stage2: vec![HashMap::new(); 512],
            entries: 0,
            rules: 0,
        }
    }
}

fn key9(ip: u32) -> usize {
    (ip >> 23) as usize
}

fn val15(ip: u32) -> u16 {
    ((ip >> 8) & 0x7FFF) as u16
}

impl BlacklistMatcher {
    pub fn build(rules: &[Rule]) -> Self {
        let mut m = BlacklistMatcher {
            rules: rules.len(),
            ..Default::default()
        };
        for r in rules {
            assert!(r.prefix >= MIN_PREFIX, "rule {r} is too short to expand");
            if r.prefix <= 24 {
                for i in 0..(1u32 << (24 - r.prefix)) {
                    m.entry(r.net + (i << 8)).whole = true;
                }
            } else {
                for i in 0..(1u32 << (32 - r.prefix)) {
                    let ip = r.net + i;
                    m.entry(ip).add_host(ip as u8);
                }
            }
        }
        m
    }

    fn entry(&mut self, ip: u32) -> &mut Stage2Entry {
        let k = key9(ip);
        self.stage1[k / 64] |= 1 << (k % 64);
        let bucket = &mut self.stage2[k];
        let v = val15(ip);
        if !bucket.contains_key(&v) {
            self.entries += 1;
        }
        bucket.entry(v).or_default()
    }

    pub fn stage1_hit(&self, ip: u32) -> bool {
        let k = key9(ip);
        self.stage1[k / 64] & (1 << (k % 64)) != 0
    }

    pub fn stage1_keys(&self) -> usize {
        self.stage1.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn stage2_entries(&self) -> usize {
        self.entries
    }

    pub fn rule_count(&self) -> usize {
        self.rules
    }

    pub fn match_ip(&self, ip: u32) -> bool {
        if !self.stage1_hit(ip) {
            return false;
        }
        self.stage2[key9(ip)]
            .get(&val15(ip))
            .is_some_and(|e| e.matches(ip as u8))
    }

    /// Approximate table size in bytes: bitmap plus one 36-byte entry each.
    pub fn table_bytes(&self) -> u64 {
        64 + self.entries as u64 * 36
    }
}

/// Reference lookup: every covered address in one flat set.
#[derive(Clone, Debug, Default)]
pub struct FlatOracle {
    addrs: HashSet<u32>,
}

impl FlatOracle {
    pub fn build(rules: &[Rule]) -> Self {
        let mut addrs = HashSet::new();
        for r in rules {
            let size = 1u64 << (32 - r.prefix);
            for i in 0..size {
                addrs.insert(r.net.wrapping_add(i as u32));
            }
        }
        FlatOracle { addrs }
    }

    pub fn contains(&self, ip: u32) -> bool {
        self.addrs.contains(&ip)
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }
}

/// Generates a seeded drop list in pf syntax: mostly /24 networks with some
/// single hosts, clustered under a few dozen 9-bit prefixes so stage-two
/// misses are common.
pub fn synthetic_rules(seed: u64, count: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roots: Vec<u32> = (0..40)
        .map(|_| {
            // keep clear of 0/8, 10/8, 127/8 and multicast
            let first = rng.gen_range(11u32..=223);
            let first = if first == 127 { 128 } else { first };
            (first << 24) | (rng.gen_range(0u32..2) << 23)
        })
        .collect();
    let mut seen = HashSet::new();
    let mut out = String::from("# synthetic drop list\n");
    while seen.len() < count {
        let root = roots[rng.gen_range(0..roots.len())];
        let rule = if rng.gen_bool(0.75) {
            Rule {
                net: root | (rng.gen_range(0u32..1 << 15) << 8),
                prefix: 24,
            }
        } else {
            Rule::host(root | rng.gen_range(0u32..1 << 23))
        };
        if seen.insert(rule) {
            out.push_str(&format!("block drop in quick from {rule} to any\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> u32 {
        u32::from(s.parse::<Ipv4Addr>().unwrap())
    }

    #[test]
    fn slash24_bit_slicing() {
        let r: Rule = "1.2.3.0/24".parse().unwrap();
        let m = BlacklistMatcher::build(&[r]);
        assert_eq!(m.stage1_keys(), 1);
        assert!(m.stage1_hit(ip("1.2.3.0")));
        assert_eq!(key9(ip("1.2.3.0")), 0x002);
        assert_eq!(val15(ip("1.2.3.0")), 0x0203);
        assert!(m.match_ip(ip("1.2.3.77")));
        // same 9-bit key, different 15 bits
        assert!(!m.match_ip(ip("1.2.4.77")));
    }

    #[test]
    fn host_rule_compares_low_byte() {
        let m = BlacklistMatcher::build(&[Rule::host(ip("8.8.8.8"))]);
        assert!(m.match_ip(ip("8.8.8.8")));
        assert!(!m.match_ip(ip("8.8.8.9")));
    }

    #[test]
    fn empty_matcher_never_matches() {
        let m = BlacklistMatcher::build(&[]);
        assert!(!m.match_ip(0));
        assert!(!m.match_ip(u32::MAX));
    }

    #[test]
    fn short_and_long_prefixes_expand() {
        let rules = parse_rules("10.16.0.0/14\n192.168.1.128/26\n").unwrap();
        let m = BlacklistMatcher::build(&rules);
        assert_eq!(m.stage2_entries(), 1024 + 1);
        assert!(m.match_ip(ip("10.19.255.1")));
        assert!(!m.match_ip(ip("10.20.0.1")));
        assert!(m.match_ip(ip("192.168.1.191")));
        assert!(!m.match_ip(ip("192.168.1.127")));
    }

    #[test]
    fn parser_formats_and_errors() {
        let text = "# header\n\n1.2.3.0/24\nblock drop in quick from 4.5.6.7 to any # trailing\n";
        let rules = parse_rules(text).unwrap();
        assert_eq!(rules, vec![
            Rule { net: ip("1.2.3.0"), prefix: 24 },
            Rule::host(ip("4.5.6.7"))
        ]);
        let err = parse_rules("1.2.3.0/24\n1.2.3/24\n").unwrap_err();
        assert!(matches!(err, RuleError::Parse { line: 2, .. }));
        assert!(parse_rules("1.0.0.0/8").is_err());
        assert!(parse_rules("1.2.3.1/24").is_err());
    }

    #[test]
    fn synthetic_list_has_requested_size() {
        let rules = parse_rules(&synthetic_rules(7, 1050)).unwrap();
        assert_eq!(rules.len(), 1050);
        let m = BlacklistMatcher::build(&rules);
        assert!(m.stage2_entries() <= 1050);
        assert_eq!(synthetic_rules(7, 1050), synthetic_rules(7, 1050));
    }

    proptest::proptest! {
        #[test]
        fn agrees_with_flat_oracle(
            seed in 0u64..1000,
            probes in proptest::collection::vec(proptest::num::u32::ANY, 200),
        ) {
            let rules = parse_rules(&synthetic_rules(seed, 60)).unwrap();
            let m = BlacklistMatcher::build(&rules);
            let o = FlatOracle::build(&rules);
            for p in probes {
                proptest::prop_assert_eq!(m.match_ip(p), o.contains(p));
            }
            for r in &rules {
                for p in [r.net.wrapping_sub(1), r.net, r.net | !r.mask(), (r.net | !r.mask()).wrapping_add(1)] {
                    proptest::prop_assert_eq!(m.match_ip(p), o.contains(p));
                }
            }
        }
    }
}
