//! Byte-class NFA construction and simulation.
//!
//! Patterns compile to a Thompson-style NFA over byte classes. Simulation
//! keeps the reachable state set as a bitmask; epsilon closures are
//! precomputed per state so a byte step is one mask pass.

use std::fmt;

const CLASS_WORDS: usize = 4; // 256 bits

#[derive(Clone, PartialEq, Eq)]
pub(crate) struct ByteClass {
    bits: [u64; CLASS_WORDS],
}

impl ByteClass {
    pub fn empty() -> Self {
        ByteClass {
            bits: [0; CLASS_WORDS],
        }
    }

    pub fn any() -> Self {
        ByteClass {
            bits: [u64::MAX; CLASS_WORDS],
        }
    }

    pub fn insert(&mut self, byte: u8) {
        self.bits[(byte >> 6) as usize] |= 1u64 << (byte & 63);
    }

    pub fn insert_range(&mut self, lo: u8, hi: u8) {
        for b in lo..=hi {
            self.insert(b);
        }
    }

    pub fn contains(&self, byte: u8) -> bool {
        self.bits[(byte >> 6) as usize] & (1u64 << (byte & 63)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|w| *w == 0)
    }
}

impl fmt::Debug for ByteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let count = self.bits.iter().map(|w| w.count_ones()).sum::<u32>();
        write!(f, "ByteClass({count} bytes)")
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Ast {
    Literal(u8),
    Class(ByteClass),
    Concat(Vec<Ast>),
    Alternate(Vec<Ast>),
    Star(Box<Ast>),
}

struct State {
    byte: Option<(ByteClass, usize)>,
    eps: Vec<usize>,
}

pub(crate) type Mask = Vec<u64>;

pub(crate) struct Nfa {
    states: Vec<State>,
    start: usize,
    accept: usize,
    words: usize,
    /// Per-state epsilon closure, as a mask over all states.
    closures: Vec<Mask>,
}

impl Nfa {
    pub fn from_ast(ast: &Ast) -> Nfa {
        let mut builder = Builder { states: Vec::new() };
        let (start, accept) = builder.build(ast);
        let states = builder.states;
        let words = states.len().div_ceil(64);
        let closures = compute_closures(&states, words);
        Nfa {
            states,
            start,
            accept,
            words,
            closures,
        }
    }

    pub fn initial(&self) -> Mask {
        self.closures[self.start].clone()
    }

    pub fn empty_mask(&self) -> Mask {
        vec![0; self.words]
    }

    pub fn accepts(&self, mask: &Mask) -> bool {
        mask[self.accept >> 6] & (1u64 << (self.accept & 63)) != 0
    }

    pub fn is_dead(&self, mask: &Mask) -> bool {
        mask.iter().all(|w| *w == 0)
    }

    /// Union the start-state closure into `mask` (re-anchoring the pattern
    /// at the current input position).
    pub fn inject_start(&self, mask: &mut Mask) {
        or_into(mask, &self.closures[self.start]);
    }

    /// Advances the state set over one input byte.
    pub fn step(&self, mask: &Mask, byte: u8) -> Mask {
        let mut next = vec![0u64; self.words];
        for (word_idx, word) in mask.iter().enumerate() {
            let mut bits = *word;
            while bits != 0 {
                let bit = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let state = word_idx * 64 + bit;
                if let Some((class, target)) = &self.states[state].byte {
                    if class.contains(byte) {
                        or_into(&mut next, &self.closures[*target]);
                    }
                }
            }
        }
        next
    }
}

fn or_into(dst: &mut Mask, src: &Mask) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d |= *s;
    }
}

fn compute_closures(states: &[State], words: usize) -> Vec<Mask> {
    let mut closures = Vec::with_capacity(states.len());
    for start in 0..states.len() {
        let mut mask = vec![0u64; words];
        let mut stack = vec![start];
        while let Some(s) = stack.pop() {
            let word = s >> 6;
            let bit = 1u64 << (s & 63);
            if mask[word] & bit != 0 {
                continue;
            }
            mask[word] |= bit;
            stack.extend(states[s].eps.iter().copied());
        }
        closures.push(mask);
    }
    closures
}

struct Builder {
    states: Vec<State>,
}

impl Builder {
    fn add(&mut self) -> usize {
        self.states.push(State {
            byte: None,
            eps: Vec::new(),
        });
        self.states.len() - 1
    }

    fn build(&mut self, ast: &Ast) -> (usize, usize) {
        match ast {
            Ast::Literal(b) => {
                let mut class = ByteClass::empty();
                class.insert(*b);
                self.class_frag(class)
            }
            Ast::Class(class) => self.class_frag(class.clone()),
            Ast::Concat(items) => {
                if items.is_empty() {
                    let s = self.add();
                    let e = self.add();
                    self.states[s].eps.push(e);
                    return (s, e);
                }
                let (start, mut end) = self.build(&items[0]);
                for item in &items[1..] {
                    let (s, e) = self.build(item);
                    self.states[end].eps.push(s);
                    end = e;
                }
                (start, end)
            }
            Ast::Alternate(branches) => {
                let s = self.add();
                let e = self.add();
                for branch in branches {
                    let (bs, be) = self.build(branch);
                    self.states[s].eps.push(bs);
                    self.states[be].eps.push(e);
                }
                (s, e)
            }
            Ast::Star(inner) => {
                let s = self.add();
                let e = self.add();
                let (is, ie) = self.build(inner);
                self.states[s].eps.push(is);
                self.states[s].eps.push(e);
                self.states[ie].eps.push(is);
                self.states[ie].eps.push(e);
                (s, e)
            }
        }
    }

    fn class_frag(&mut self, class: ByteClass) -> (usize, usize) {
        let s = self.add();
        let e = self.add();
        self.states[s].byte = Some((class, e));
        (s, e)
    }
}
