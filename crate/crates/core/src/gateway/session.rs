use std::collections::HashMap;
use std::time::Duration;

use rand::RngCore;

use crate::clock::{self, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: String,
    pub created: Timestamp,
    pub last_seen: Timestamp,
    pub access_token: String,
    /// Last identity token minted for this session and its expiry.
    pub token: Option<(String, i64)>,
}

/// Server-side session table keyed by an opaque random id.
#[derive(Debug)]
pub struct SessionStore {
    sessions: HashMap<String, Session>,
    idle: Duration,
}

fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::thread_rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

impl SessionStore {
    pub fn new(idle: Duration) -> Self {
        Self {
            sessions: HashMap::new(),
            idle,
        }
    }

    pub fn create(&mut self, user: &str, now: Timestamp) -> String {
        let id = random_hex(32);
        self.sessions.insert(
            id.clone(),
            Session {
                user: user.to_string(),
                created: now,
                last_seen: now,
                access_token: random_hex(24),
                token: None,
            },
        );
        id
    }

    /// Looks up a live session and marks it used; idle sessions are dropped.
    pub fn touch(&mut self, id: &str, now: Timestamp) -> Option<&mut Session> {
        let expired = clock::elapsed(self.sessions.get(id)?.last_seen, now) > self.idle;
        if expired {
            self.sessions.remove(id);
            return None;
        }
        let s = self.sessions.get_mut(id)?;
        s.last_seen = s.last_seen.max(now);
        Some(s)
    }

    pub fn remove(&mut self, id: &str) -> Option<Session> {
        self.sessions.remove(id)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}
