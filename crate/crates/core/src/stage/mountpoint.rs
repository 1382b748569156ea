use std::collections::BTreeSet;

use super::StageError;

/// Lexically normalize an absolute path: collapse `//`, drop `.`, resolve `..`
/// (never above root) and strip the trailing slash.
pub fn normalize_path(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    if parts.is_empty() {
        return Some("/".to_string());
    }
    let mut out = String::with_capacity(path.len());
    for p in parts {
        out.push('/');
        out.push_str(p);
    }
    Some(out)
}

fn needs_normalizing(path: &str) -> bool {
    let b = path.as_bytes();
    b.windows(2).any(|w| w[0] == b'/' && (w[1] == b'/' || w[1] == b'.')) || (b.len() > 1 && b[b.len() - 1] == b'/')
}

/// True when `path` equals `prefix` or lies under it at a component boundary.
fn under(prefix: &str, path: &str) -> bool {
    if prefix == "/" {
        return true;
    }
    path.starts_with(prefix) && (path.len() == prefix.len() || path.as_bytes()[prefix.len()] == b'/')
}

#[derive(Debug, Clone, Default)]
pub struct MountpointRegistry {
    registered: BTreeSet<String>,
}

impl MountpointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, path: &str) -> Result<(), StageError> {
        let normalized = normalize_path(path).ok_or_else(|| StageError::RelativeMountpoint(path.to_string()))?;
        self.registered.insert(normalized);
        Ok(())
    }

    pub fn is_managed(&self, path: &str) -> bool {
        if self.registered.is_empty() || !path.starts_with('/') {
            return false;
        }
        if needs_normalizing(path) {
            match normalize_path(path) {
                Some(p) => self.registered.iter().any(|m| under(m, &p)),
                None => false,
            }
        } else {
            self.registered.iter().any(|m| under(m, path))
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.registered.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.registered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registered.is_empty()
    }
}
