//! Independent brute-force matcher used to cross-check the streaming
//! acceptors. It re-implements the restricted pattern syntax with its own
//! recursive-descent parser and a backtracking evaluator over explicit end
//! positions; it deliberately shares no code with the library.

use dpdlab_core::signature::MatchStatus;
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub enum Node {
    Byte(u8),
    Class(Box<[bool; 256]>),
    Seq(Vec<Node>),
    Alt(Vec<Node>),
    Star(Box<Node>),
}

pub fn parse(pattern: &str) -> Node {
    let bytes = pattern.as_bytes();
    let mut pos = 0;
    if bytes.first() == Some(&b'^') {
        pos = 1;
    }
    let node = parse_alt(bytes, &mut pos);
    assert_eq!(pos, bytes.len(), "oracle parser consumed the whole pattern");
    node
}

pub fn parse_glob(glob: &str) -> Node {
    let mut items = Vec::new();
    for &b in glob.as_bytes() {
        if b == b'*' {
            let mut class = [true; 256];
            class[0] = true;
            items.push(Node::Star(Box::new(Node::Class(Box::new(class)))));
        } else {
            items.push(Node::Byte(b));
        }
    }
    Node::Seq(items)
}

fn parse_alt(bytes: &[u8], pos: &mut usize) -> Node {
    let mut branches = vec![parse_seq(bytes, pos)];
    while bytes.get(*pos) == Some(&b'|') {
        *pos += 1;
        branches.push(parse_seq(bytes, pos));
    }
    if branches.len() == 1 {
        branches.pop().unwrap()
    } else {
        Node::Alt(branches)
    }
}

fn parse_seq(bytes: &[u8], pos: &mut usize) -> Node {
    let mut items = Vec::new();
    while let Some(&b) = bytes.get(*pos) {
        if b == b'|' || b == b')' {
            break;
        }
        let atom = match b {
            b'(' => {
                *pos += 1;
                let inner = parse_alt(bytes, pos);
                assert_eq!(bytes.get(*pos), Some(&b')'), "oracle: unclosed group");
                *pos += 1;
                inner
            }
            b'[' => parse_class(bytes, pos),
            b'\\' => {
                *pos += 1;
                let escaped = bytes[*pos];
                *pos += 1;
                Node::Byte(unescape(escaped))
            }
            _ => {
                *pos += 1;
                Node::Byte(b)
            }
        };
        if bytes.get(*pos) == Some(&b'*') {
            *pos += 1;
            items.push(Node::Star(Box::new(atom)));
        } else {
            items.push(atom);
        }
    }
    assert!(!items.is_empty(), "oracle: empty branch");
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        Node::Seq(items)
    }
}

fn parse_class(bytes: &[u8], pos: &mut usize) -> Node {
    assert_eq!(bytes[*pos], b'[');
    *pos += 1;
    let mut set = [false; 256];
    loop {
        match bytes[*pos] {
            b']' => {
                *pos += 1;
                break;
            }
            b'[' if bytes.get(*pos + 1) == Some(&b':') => {
                *pos += 2;
                let start = *pos;
                while bytes[*pos] != b':' {
                    *pos += 1;
                }
                let name = std::str::from_utf8(&bytes[start..*pos]).unwrap();
                assert_eq!(bytes[*pos + 1], b']');
                *pos += 2;
                for b in posix_members(name) {
                    set[b as usize] = true;
                }
            }
            first => {
                let lo = if first == b'\\' {
                    *pos += 1;
                    let e = unescape(bytes[*pos]);
                    *pos += 1;
                    e
                } else {
                    *pos += 1;
                    first
                };
                if bytes[*pos] == b'-' && bytes.get(*pos + 1) != Some(&b']') {
                    *pos += 1;
                    let hi = if bytes[*pos] == b'\\' {
                        *pos += 1;
                        let e = unescape(bytes[*pos]);
                        *pos += 1;
                        e
                    } else {
                        let h = bytes[*pos];
                        *pos += 1;
                        h
                    };
                    for b in lo..=hi {
                        set[b as usize] = true;
                    }
                } else {
                    set[lo as usize] = true;
                }
            }
        }
    }
    Node::Class(Box::new(set))
}

fn posix_members(name: &str) -> Vec<u8> {
    match name {
        "space" => vec![b' ', b'\t', b'\n', 0x0B, 0x0C, b'\r'],
        "digit" => (b'0'..=b'9').collect(),
        "upper" => (b'A'..=b'Z').collect(),
        "lower" => (b'a'..=b'z').collect(),
        "alpha" => (b'A'..=b'Z').chain(b'a'..=b'z').collect(),
        "alnum" => (b'0'..=b'9').chain(b'A'..=b'Z').chain(b'a'..=b'z').collect(),
        other => panic!("oracle: POSIX class {other}"),
    }
}

fn unescape(b: u8) -> u8 {
    match b {
        b'r' => b'\r',
        b'n' => b'\n',
        b't' => b'\t',
        other => other,
    }
}

/// All end positions where `node` matches `input[pos..end]` exactly, plus
/// whether some derivation ran out of input (the word could extend past the
/// end). Every node in the subset matches at least one finite string, so
/// `needs_more` is exactly "viable with more bytes".
struct Out {
    ends: BTreeSet<usize>,
    needs_more: bool,
}

fn bt(node: &Node, input: &[u8], pos: usize) -> Out {
    match node {
        Node::Byte(b) => {
            if pos == input.len() {
                Out {
                    ends: BTreeSet::new(),
                    needs_more: true,
                }
            } else if input[pos] == *b {
                Out {
                    ends: BTreeSet::from([pos + 1]),
                    needs_more: false,
                }
            } else {
                Out {
                    ends: BTreeSet::new(),
                    needs_more: false,
                }
            }
        }
        Node::Class(set) => {
            if pos == input.len() {
                Out {
                    ends: BTreeSet::new(),
                    needs_more: true,
                }
            } else if set[input[pos] as usize] {
                Out {
                    ends: BTreeSet::from([pos + 1]),
                    needs_more: false,
                }
            } else {
                Out {
                    ends: BTreeSet::new(),
                    needs_more: false,
                }
            }
        }
        Node::Seq(items) => bt_seq(items, input, pos),
        Node::Alt(branches) => {
            let mut out = Out {
                ends: BTreeSet::new(),
                needs_more: false,
            };
            for branch in branches {
                let b = bt(branch, input, pos);
                out.ends.extend(b.ends);
                out.needs_more |= b.needs_more;
            }
            out
        }
        Node::Star(inner) => {
            let mut reachable = BTreeSet::from([pos]);
            let mut frontier = vec![pos];
            let mut needs_more = false;
            while let Some(p) = frontier.pop() {
                let step = bt(inner, input, p);
                needs_more |= step.needs_more;
                for e in step.ends {
                    if reachable.insert(e) {
                        frontier.push(e);
                    }
                }
            }
            Out {
                ends: reachable,
                needs_more,
            }
        }
    }
}

fn bt_seq(items: &[Node], input: &[u8], pos: usize) -> Out {
    match items.split_first() {
        None => Out {
            ends: BTreeSet::from([pos]),
            needs_more: false,
        },
        Some((first, rest)) => {
            let head = bt(first, input, pos);
            let mut out = Out {
                ends: BTreeSet::new(),
                needs_more: head.needs_more,
            };
            for e in head.ends {
                let tail = bt_seq(rest, input, e);
                out.ends.extend(tail.ends);
                out.needs_more |= tail.needs_more;
            }
            out
        }
    }
}

/// Final status of prefix-matching `node` against the whole input: Matched
/// if any input prefix is in the language, Pending if more bytes could still
/// produce a match, Failed otherwise.
pub fn status(node: &Node, input: &[u8]) -> MatchStatus {
    let out = bt(node, input, 0);
    if !out.ends.is_empty() {
        MatchStatus::Matched
    } else if out.needs_more {
        MatchStatus::Pending
    } else {
        MatchStatus::Failed
    }
}

/// Spell-side status: discard leading skip-set bytes, then race the globs.
pub fn spell_status(globs: &[Node], skip_set: &[u8], input: &[u8]) -> MatchStatus {
    let start = input
        .iter()
        .position(|b| !skip_set.contains(b))
        .unwrap_or(input.len());
    let rest = &input[start..];
    let statuses: Vec<MatchStatus> = globs.iter().map(|g| status(g, rest)).collect();
    if statuses.contains(&MatchStatus::Matched) {
        MatchStatus::Matched
    } else if statuses.iter().all(|s| *s == MatchStatus::Failed) {
        MatchStatus::Failed
    } else {
        MatchStatus::Pending
    }
}
