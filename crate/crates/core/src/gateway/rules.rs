use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "target_group", rename_all = "kebab-case")]
pub enum RuleAction {
    /// Require a gateway session, then forward with identity headers.
    AuthenticateThenForward(String),
    /// Forward without authentication.
    Forward(String),
    RedirectToSecure,
    /// Forward, adding identity headers when a session happens to exist.
    PublicForward(String),
}

impl RuleAction {
    pub fn target_group(&self) -> Option<&str> {
        match self {
            RuleAction::AuthenticateThenForward(g) | RuleAction::Forward(g) | RuleAction::PublicForward(g) => Some(g),
            RuleAction::RedirectToSecure => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerRule {
    pub priority: u32,
    #[serde(default)]
    pub host_pattern: Option<String>,
    pub path_pattern: String,
    pub action: RuleAction,
}

impl ListenerRule {
    pub fn new(priority: u32, path_pattern: impl Into<String>, action: RuleAction) -> Self {
        Self {
            priority,
            host_pattern: None,
            path_pattern: path_pattern.into(),
            action,
        }
    }

    pub fn with_host(mut self, host_pattern: impl Into<String>) -> Self {
        self.host_pattern = Some(host_pattern.into());
        self
    }

    pub fn matches(&self, host: &str, path: &str) -> bool {
        let host_ok = match &self.host_pattern {
            Some(p) => glob_match(&p.to_ascii_lowercase(), &host.to_ascii_lowercase()),
            None => true,
        };
        host_ok && glob_match(&self.path_pattern, path)
    }
}

/// First rule, in ascending priority, whose host and path patterns both
/// match. `rules` must already be sorted by priority.
pub fn match_request<'a>(rules: &'a [ListenerRule], host: &str, path: &str) -> Option<&'a ListenerRule> {
    debug_assert!(rules.windows(2).all(|w| w[0].priority < w[1].priority));
    rules.iter().find(|r| r.matches(host, path))
}

/// `*` matches any run of characters, `?` exactly one; everything else is
/// literal. The whole input must match.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}
