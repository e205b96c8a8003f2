//! Unified token space: word-level text tokens, two control tokens, and one
//! `<visual_token_N>` per codebook row, laid out as contiguous ID ranges.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{MultiScaleTokenMaps, Schedule, TokenMap};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const GEN_START: &str = "<gen_start>";
pub const GEN_END: &str = "<gen_end>";

/// Fixed word list for the synthetic instruction domain.
pub const DEFAULT_WORDS: &[&str] = &[
    "segment", "find", "highlight", "mask", "show", "select", "locate", "outline", "the", "a", "an", "all", "every",
    "each", "any", "red", "green", "blue", "circle", "circles", "square", "squares", "triangle", "triangles",
    "object", "objects", "shape", "shapes", "small", "large", "big", "little", "please", "in", "on", "of", "and",
    "image", "picture", "scene", "me", "that", "is", "are", "which", "left", "right", "top", "bottom", "there",
    "no", "none", "one", "two", "three", "colored", "region", "area", "pixels", "with",
];

/// IDs: `[0, text_len)` text (PAD = 0, UNK = 1), then `<gen_start>`,
/// `<gen_end>`, then `V` visual tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedVocab {
    text: Vec<String>,
    visual_count: usize,
}

impl UnifiedVocab {
    pub fn new(words: &[&str], visual_count: usize) -> Result<Self> {
        if visual_count < 2 {
            return Err(Error::Config("at least two visual tokens are required".into()));
        }
        let mut text = vec![PAD.to_string(), UNK.to_string()];
        for &w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if text.iter().any(|t| t == w) || [GEN_START, GEN_END].contains(&w) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            text.push(w.to_string());
        }
        Ok(Self { text, visual_count })
    }

    pub fn with_default_words(visual_count: usize) -> Self {
        Self::new(DEFAULT_WORDS, visual_count).expect("default word list is valid")
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn gen_start_id(&self) -> u32 {
        self.text.len() as u32
    }

    pub fn gen_end_id(&self) -> u32 {
        self.text.len() as u32 + 1
    }

    pub fn visual_base(&self) -> u32 {
        self.text.len() as u32 + 2
    }

    pub fn visual_count(&self) -> usize {
        self.visual_count
    }

    pub fn size(&self) -> usize {
        self.text.len() + 2 + self.visual_count
    }

    pub fn is_visual(&self, id: u32) -> bool {
        id >= self.visual_base() && (id as usize) < self.size()
    }

    pub fn is_text(&self, id: u32) -> bool {
        (id as usize) < self.text.len()
    }

    pub fn visual_id(&self, index: u32) -> Result<u32> {
        if index as usize >= self.visual_count {
            return Err(Error::IndexOutOfRange { index: index as usize, limit: self.visual_count });
        }
        Ok(self.visual_base() + index)
    }

    pub fn visual_index(&self, id: u32) -> Result<u32> {
        if !self.is_visual(id) {
            return Err(Error::Token { id, reason: "not a visual token".into() });
        }
        Ok(id - self.visual_base())
    }

    pub fn token(&self, id: u32) -> Option<String> {
        let i = id as usize;
        if i < self.text.len() {
            Some(self.text[i].clone())
        } else if id == self.gen_start_id() {
            Some(GEN_START.into())
        } else if id == self.gen_end_id() {
            Some(GEN_END.into())
        } else if self.is_visual(id) {
            Some(format!("<visual_token_{}>", id - self.visual_base()))
        } else {
            None
        }
    }

    /// Whitespace-split word lookup; unknown words become `<unk>`.
    pub fn encode_text(&self, s: &str) -> Vec<u32> {
        s.split_whitespace()
            .map(|w| self.text.iter().position(|t| t == w).map_or(self.unk_id(), |i| i as u32))
            .collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or_else(|| UNK.into())).collect::<Vec<_>>().join(" ")
    }

    /// Row-major per scale, scales in order.
    pub fn maps_to_ids(&self, maps: &MultiScaleTokenMaps) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(maps.token_count());
        for m in &maps.maps {
            for &i in &m.indices {
                out.push(self.visual_id(i)?);
            }
        }
        Ok(out)
    }

    pub fn ids_to_maps(&self, ids: &[u32], schedule: &Schedule) -> Result<MultiScaleTokenMaps> {
        if ids.len() != schedule.total_tokens() {
            return Err(Error::Dimension(format!(
                "{} ids for a schedule of {} tokens",
                ids.len(),
                schedule.total_tokens()
            )));
        }
        let mut maps = Vec::with_capacity(schedule.len());
        let mut rest = ids;
        for (k, &(h, w)) in schedule.scales().iter().enumerate() {
            let (head, tail) = rest.split_at(h * w);
            let indices = head.iter().map(|&id| self.visual_index(id)).collect::<Result<Vec<_>>>()?;
            maps.push(TokenMap { scale_index: k + 1, height: h, width: w, indices });
            rest = tail;
        }
        MultiScaleTokenMaps::new(schedule.clone(), maps)
    }

    /// Plain-text form: one token per line under `[text]`, `[control]` and
    /// `[visual]` section headers.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from("# unified vocabulary v1\n[text]\n");
        for t in &self.text {
            let _ = writeln!(s, "{t}");
        }
        let _ = writeln!(s, "[control]\n{GEN_START}\n{GEN_END}\n[visual]");
        for v in 0..self.visual_count {
            let _ = writeln!(s, "<visual_token_{v}>");
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Text,
            Control,
            Visual,
        }
        let mut section = Section::None;
        let mut words = Vec::new();
        let mut controls = Vec::new();
        let mut visual = 0usize;
        for (i, raw) in s.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: String| Error::Parse { line: i + 1, reason };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[text]" => section = Section::Text,
                "[control]" => section = Section::Control,
                "[visual]" => section = Section::Visual,
                tok => match section {
                    Section::None => return Err(err("token before any section header".into())),
                    Section::Text => words.push(tok.to_string()),
                    Section::Control => controls.push(tok.to_string()),
                    Section::Visual => {
                        if tok != format!("<visual_token_{visual}>") {
                            return Err(err(format!("expected <visual_token_{visual}>, found {tok}")));
                        }
                        visual += 1;
                    }
                },
            }
        }
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Parse { line: 0, reason: "text section must start with <pad>, <unk>".into() });
        }
        if controls != [GEN_START, GEN_END] {
            return Err(Error::Parse { line: 0, reason: "control section must be <gen_start>, <gen_end>".into() });
        }
        let rest: Vec<&str> = words[2..].iter().map(String::as_str).collect();
        Self::new(&rest, visual)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}
