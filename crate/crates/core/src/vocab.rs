//! Unified tri-modal token space and sequence assembly.
//!
//! Id layout is fixed: the three payload ranges come first in modality order
//! (text, image, audio), followed by the nine boundary/mask tokens, the three
//! task tokens and finally `PAD_text`.

use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};

pub type TokenId = u32;

pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Number of BOS/EOS/MASK tokens (one triple per modality).
pub const N_BOUNDARY_SPECIALS: usize = 9;
pub const N_TASK_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Audio];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Audio => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            other => Err(MdmError::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// The three training/inference tasks, each with its own task token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Text,
    ImageText,
    AudioText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Text, TaskKind::ImageText, TaskKind::AudioText];

    pub fn index(self) -> usize {
        match self {
            TaskKind::Text => 0,
            TaskKind::ImageText => 1,
            TaskKind::AudioText => 2,
        }
    }

    /// The non-text modality carried by a pair task, or text for the text task.
    pub fn primary_modality(self) -> Modality {
        match self {
            TaskKind::Text => Modality::Text,
            TaskKind::ImageText => Modality::Image,
            TaskKind::AudioText => Modality::Audio,
        }
    }

    pub fn is_pair(self) -> bool {
        self != TaskKind::Text
    }
}

impl std::str::FromStr for TaskKind {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TaskKind::Text),
            "image-text" | "image" => Ok(TaskKind::ImageText),
            "audio-text" | "audio" => Ok(TaskKind::AudioText),
            other => Err(MdmError::invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Half-open id interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub start: TokenId,
    pub end: TokenId,
}

impl TokenRange {
    pub fn contains(&self, id: TokenId) -> bool {
        id >= self.start && id < self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iter(&self) -> std::ops::Range<TokenId> {
        self.start..self.end
    }
}

/// What a token id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Payload(Modality),
    Bos(Modality),
    Eos(Modality),
    Mask(Modality),
    Task(TaskKind),
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub format_version: u32,
    pub sizes: [usize; 3],
    pub ranges: [TokenRange; 3],
    pub bos: [TokenId; 3],
    pub eos: [TokenId; 3],
    pub mask: [TokenId; 3],
    pub task: [TokenId; 3],
    pub pad_text: TokenId,
    pub total: usize,
}

impl UnifiedVocab {
    /// Builds the vocabulary from per-modality payload sizes `[text, image, audio]`.
    pub fn build(sizes: [usize; 3]) -> Result<Self> {
        if let Some(m) = Modality::ALL.iter().find(|m| sizes[m.index()] == 0) {
            return Err(MdmError::invalid(format!(
                "modality {} has an empty vocabulary",
                m.name()
            )));
        }
        let total = sizes.iter().sum::<usize>() + N_BOUNDARY_SPECIALS + N_TASK_TOKENS + 1;
        if total > TokenId::MAX as usize {
            return Err(MdmError::invalid("vocabulary exceeds the id space"));
        }

        let mut next: TokenId = 0;
        let mut ranges = [TokenRange { start: 0, end: 0 }; 3];
        for m in Modality::ALL {
            let start = next;
            next += sizes[m.index()] as TokenId;
            ranges[m.index()] = TokenRange { start, end: next };
        }
        let (mut bos, mut eos, mut mask) = ([0; 3], [0; 3], [0; 3]);
        for m in Modality::ALL {
            bos[m.index()] = next;
            eos[m.index()] = next + 1;
            mask[m.index()] = next + 2;
            next += 3;
        }
        let mut task = [0; 3];
        for t in TaskKind::ALL {
            task[t.index()] = next;
            next += 1;
        }
        let pad_text = next;
        debug_assert_eq!(pad_text as usize + 1, total);

        Ok(UnifiedVocab {
            format_version: VOCAB_FORMAT_VERSION,
            sizes,
            ranges,
            bos,
            eos,
            mask,
            task,
            pad_text,
            total,
        })
    }

    pub fn size(&self) -> usize {
        self.total
    }

    pub fn range(&self, m: Modality) -> TokenRange {
        self.ranges[m.index()]
    }

    pub fn bos(&self, m: Modality) -> TokenId {
        self.bos[m.index()]
    }

    pub fn eos(&self, m: Modality) -> TokenId {
        self.eos[m.index()]
    }

    pub fn mask_id(&self, m: Modality) -> TokenId {
        self.mask[m.index()]
    }

    pub fn task_id(&self, t: TaskKind) -> TokenId {
        self.task[t.index()]
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        if let Some(m) = Modality::ALL
            .into_iter()
            .find(|m| self.range(*m).contains(id))
        {
            return Some(TokenKind::Payload(m));
        }
        for m in Modality::ALL {
            if id == self.bos(m) {
                return Some(TokenKind::Bos(m));
            }
            if id == self.eos(m) {
                return Some(TokenKind::Eos(m));
            }
            if id == self.mask_id(m) {
                return Some(TokenKind::Mask(m));
            }
        }
        if let Some(t) = TaskKind::ALL.into_iter().find(|t| self.task_id(*t) == id) {
            return Some(TokenKind::Task(t));
        }
        if id == self.pad_text {
            return Some(TokenKind::Pad);
        }
        None
    }

    /// Modality of any in-range id. Special tokens map through their subscript;
    /// task tokens map to the modality they introduce.
    pub fn modality_of(&self, id: TokenId) -> Option<Modality> {
        Some(match self.kind(id)? {
            TokenKind::Payload(m) | TokenKind::Bos(m) | TokenKind::Eos(m) | TokenKind::Mask(m) => m,
            TokenKind::Task(t) => t.primary_modality(),
            TokenKind::Pad => Modality::Text,
        })
    }

    pub fn is_mask(&self, id: TokenId) -> bool {
        self.mask.contains(&id)
    }

    pub fn is_task(&self, id: TokenId) -> bool {
        self.task.contains(&id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a serialized vocabulary against a rebuild from its sizes.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: UnifiedVocab = serde_json::from_str(s)?;
        if v.format_version != VOCAB_FORMAT_VERSION {
            return Err(MdmError::Format(format!(
                "unsupported vocab format version {}",
                v.format_version
            )));
        }
        let rebuilt = UnifiedVocab::build(v.sizes)?;
        if rebuilt != v {
            return Err(MdmError::Format(
                "vocab document is inconsistent with its sizes".into(),
            ));
        }
        Ok(v)
    }

    fn check_payload(&self, m: Modality, tokens: &[TokenId]) -> Result<()> {
        let r = self.range(m);
        match tokens.iter().find(|id| !r.contains(**id)) {
            Some(id) => Err(MdmError::invalid(format!(
                "token {id} is not a {} payload id",
                m.name()
            ))),
            None => Ok(()),
        }
    }
}

/// A length-L* token vector with per-position modality and maskability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub maskable: Vec<bool>,
    pub modality: Vec<Modality>,
    pub task: TaskKind,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rebuilds a sequence from a flat id array. Position 0 must be a task
    /// token; task and pad positions are the only non-maskable ones.
    pub fn from_tokens(vocab: &UnifiedVocab, tokens: Vec<TokenId>) -> Result<Self> {
        let task = match tokens.first().and_then(|id| vocab.kind(*id)) {
            Some(TokenKind::Task(t)) => t,
            _ => return Err(MdmError::invalid("position 0 must hold a task token")),
        };
        let mut maskable = Vec::with_capacity(tokens.len());
        let mut modality = Vec::with_capacity(tokens.len());
        for (i, &id) in tokens.iter().enumerate() {
            let kind = vocab
                .kind(id)
                .ok_or_else(|| MdmError::invalid(format!("token id {id} out of range")))?;
            if i > 0 && matches!(kind, TokenKind::Task(_)) {
                return Err(MdmError::invalid(format!("task token at position {i}")));
            }
            maskable.push(!matches!(kind, TokenKind::Task(_) | TokenKind::Pad));
            modality.push(vocab.modality_of(id).expect("kind implies modality"));
        }
        Ok(Sequence {
            tokens,
            maskable,
            modality,
            task,
        })
    }

    /// Positions that take part in attention (everything except padding).
    pub fn attention_mask(&self, vocab: &UnifiedVocab) -> Vec<bool> {
        self.tokens.iter().map(|&id| id != vocab.pad_text).collect()
    }

    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.maskable[i]).collect()
    }
}

/// Lays out a mixed-modality sample:
/// `TASK, BOS_m, payload_m, EOS_m, BOS_text, payload_text, EOS_text, PAD_text...`.
pub fn assemble_pair(
    vocab: &UnifiedVocab,
    task: TaskKind,
    payload_m: &[TokenId],
    payload_text: &[TokenId],
    l_star: usize,
) -> Result<Sequence> {
    if !task.is_pair() {
        return Err(MdmError::invalid(
            "assemble_pair needs an image-text or audio-text task",
        ));
    }
    let m = task.primary_modality();
    vocab.check_payload(m, payload_m)?;
    vocab.check_payload(Modality::Text, payload_text)?;

    let required = 1 + 2 + payload_m.len() + 2 + payload_text.len();
    if required > l_star {
        return Err(MdmError::SequenceTooLong {
            required,
            max: l_star,
        });
    }

    let mut tokens = Vec::with_capacity(l_star);
    tokens.push(vocab.task_id(task));
    tokens.push(vocab.bos(m));
    tokens.extend_from_slice(payload_m);
    tokens.push(vocab.eos(m));
    tokens.push(vocab.bos(Modality::Text));
    tokens.extend_from_slice(payload_text);
    tokens.push(vocab.eos(Modality::Text));
    tokens.resize(l_star, vocab.pad_text);
    Sequence::from_tokens(vocab, tokens)
}

/// Fills one packed text sequence: `TASK_text` followed by the next `L* - 1`
/// tokens of the stream. Fails if the stream runs dry before the window is full.
pub fn pack_text<I>(vocab: &UnifiedVocab, stream: &mut I, l_star: usize) -> Result<Sequence>
where
    I: Iterator<Item = TokenId>,
{
    if l_star < 2 {
        return Err(MdmError::invalid(
            "L* must leave room for at least one text token",
        ));
    }
    let mut tokens = Vec::with_capacity(l_star);
    tokens.push(vocab.task_id(TaskKind::Text));
    tokens.extend(stream.by_ref().take(l_star - 1));
    match tokens.len() {
        1 => return Err(MdmError::invalid("empty text stream")),
        n if n < l_star => {
            return Err(MdmError::invalid(format!(
                "text stream exhausted after {} of {} tokens",
                n - 1,
                l_star - 1
            )))
        }
        _ => {}
    }
    for &id in &tokens[1..] {
        match vocab.kind(id) {
            Some(TokenKind::Payload(Modality::Text))
            | Some(TokenKind::Bos(Modality::Text))
            | Some(TokenKind::Eos(Modality::Text)) => {}
            _ => return Err(MdmError::invalid(format!("token {id} is not a text token"))),
        }
    }
    Sequence::from_tokens(vocab, tokens)
}

/// Concatenates documents with `EOS_text` separators and splits the stream
/// greedily into packed sequences. The trailing partial window is dropped.
pub fn pack_documents(
    vocab: &UnifiedVocab,
    docs: &[Vec<TokenId>],
    l_star: usize,
) -> Result<Vec<Sequence>> {
    let eos = vocab.eos(Modality::Text);
    let total: usize = docs.iter().map(|d| d.len() + 1).sum();
    if total == 0 {
        return Err(MdmError::invalid("no documents to pack"));
    }
    let mut stream = docs
        .iter()
        .flat_map(|d| d.iter().copied().chain(std::iter::once(eos)))
        .peekable();
    let mut out = Vec::with_capacity(total / l_star.max(2));
    for _ in 0..total / (l_star.max(2) - 1) {
        out.push(pack_text(vocab, &mut stream, l_star)?);
    }
    if out.is_empty() {
        return Err(MdmError::invalid(format!(
            "{} stream tokens cannot fill one window of {}",
            total,
            l_star - 1
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UnifiedVocab {
        UnifiedVocab::build([2, 2, 2]).unwrap()
    }

    #[test]
    fn size_formula() {
        assert_eq!(small().size(), 19);
        let full = UnifiedVocab::build([100_281, 16_387, 1_027]).unwrap();
        assert_eq!(full.size(), 117_708);
    }

    #[test]
    fn zero_size_modality_rejected() {
        assert!(matches!(
            UnifiedVocab::build([3, 0, 1]),
            Err(MdmError::InvalidArgument(_))
        ));
    }

    #[test]
    fn ranges_are_contiguous_and_disjoint() {
        let v = UnifiedVocab::build([5, 3, 4]).unwrap();
        let mut seen = vec![0u8; v.size()];
        for m in Modality::ALL {
            for id in v.range(m).iter() {
                seen[id as usize] += 1;
            }
            seen[v.bos(m) as usize] += 1;
            seen[v.eos(m) as usize] += 1;
            seen[v.mask_id(m) as usize] += 1;
        }
        for t in TaskKind::ALL {
            seen[v.task_id(t) as usize] += 1;
        }
        seen[v.pad_text as usize] += 1;
        assert!(seen.iter().all(|&c| c == 1));
        assert!(v.kind(v.size() as TokenId).is_none());
    }

    #[test]
    fn modality_of_range_starts() {
        let v = small();
        assert_eq!(
            v.modality_of(v.range(Modality::Image).start),
            Some(Modality::Image)
        );
        assert_eq!(
            v.modality_of(v.mask_id(Modality::Audio)),
            Some(Modality::Audio)
        );
        assert_eq!(v.modality_of(v.pad_text), Some(Modality::Text));
    }

    #[test]
    fn audio_text_layout() {
        let v = UnifiedVocab::build([10, 10, 10]).unwrap();
        let a: Vec<_> = v.range(Modality::Audio).iter().take(3).collect();
        let t: Vec<_> = v.range(Modality::Text).iter().take(2).collect();
        let s = assemble_pair(&v, TaskKind::AudioText, &a, &t, 12).unwrap();
        let expect = vec![
            v.task_id(TaskKind::AudioText),
            v.bos(Modality::Audio),
            a[0],
            a[1],
            a[2],
            v.eos(Modality::Audio),
            v.bos(Modality::Text),
            t[0],
            t[1],
            v.eos(Modality::Text),
            v.pad_text,
            v.pad_text,
        ];
        assert_eq!(s.tokens, expect);
        let non_maskable: Vec<_> = (0..12).filter(|&i| !s.maskable[i]).collect();
        assert_eq!(non_maskable, vec![0, 10, 11]);
        assert_eq!(s.modality[3], Modality::Audio);
        assert_eq!(s.modality[8], Modality::Text);
        assert_eq!(s.attention_mask(&v)[10], false);
    }

    #[test]
    fn exact_fill_and_empty_text() {
        let v = small();
        let img: Vec<_> = v.range(Modality::Image).iter().collect();
        let s = assemble_pair(&v, TaskKind::ImageText, &img, &[0], 8).unwrap();
        assert!(!s.tokens.contains(&v.pad_text));

        let s = assemble_pair(&v, TaskKind::ImageText, &img, &[], 8).unwrap();
        assert_eq!(s.tokens[5], v.bos(Modality::Text));
        assert_eq!(s.tokens[6], v.eos(Modality::Text));
    }

    #[test]
    fn overflow_reports_required_length() {
        let v = small();
        let img: Vec<_> = v.range(Modality::Image).iter().collect();
        match assemble_pair(&v, TaskKind::ImageText, &img, &[0, 1], 8) {
            Err(MdmError::SequenceTooLong { required, max }) => {
                assert_eq!((required, max), (9, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_modality_payload_rejected() {
        let v = small();
        let audio: Vec<_> = v.range(Modality::Audio).iter().collect();
        assert!(assemble_pair(&v, TaskKind::ImageText, &audio, &[], 8).is_err());
    }

    #[test]
    fn packing_fills_window_without_pads() {
        let v = UnifiedVocab::build([50, 2, 2]).unwrap();
        let l = 8;
        let stream: Vec<TokenId> = (0..(2 * l) as TokenId).collect();
        let mut it = stream.iter().copied();
        let first = pack_text(&v, &mut it, l).unwrap();
        assert_eq!(first.len(), l);
        assert_eq!(&first.tokens[1..], &stream[..l - 1]);
        assert!(!first.tokens.contains(&v.pad_text));
        assert!(!first.maskable[0]);
        assert!(first.maskable[1..].iter().all(|&b| b));

        let exact: Vec<TokenId> = (0..(l - 1) as TokenId).collect();
        let s = pack_text(&v, &mut exact.iter().copied(), l).unwrap();
        assert_eq!(&s.tokens[1..], &exact[..]);

        assert!(pack_text(&v, &mut std::iter::empty(), l).is_err());
    }

    #[test]
    fn short_document_continues_into_next() {
        let v = UnifiedVocab::build([50, 2, 2]).unwrap();
        let l = 6;
        // First document plus its separator is one short of the 5-token window.
        let docs = vec![vec![1, 2, 3], vec![10, 11, 12, 13, 14, 15]];
        let seqs = pack_documents(&v, &docs, l).unwrap();
        let eos = v.eos(Modality::Text);
        assert_eq!(seqs[0].tokens[1..], [1, 2, 3, eos, 10]);
        assert_eq!(seqs[1].tokens[1..], [11, 12, 13, 14, 15]);
        assert_eq!(seqs.len(), 2);
    }

    #[test]
    fn json_roundtrip_validates() {
        let v = UnifiedVocab::build([7, 5, 3]).unwrap();
        let back = UnifiedVocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        let tampered = v
            .to_json()
            .unwrap()
            .replace("\"pad_text\": 27", "\"pad_text\": 3");
        assert!(UnifiedVocab::from_json(&tampered).is_err());
    }
}
