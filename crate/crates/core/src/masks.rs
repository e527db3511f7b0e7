//! Task-specific attention masks over the unified token sequence.
//!
//! Detection sequences are laid out `[z_gen | h_det | instruction | answer]`;
//! generation sequences are `[caption | latents]`.

use std::ops::Range;

use crate::error::{Error, Result};

/// A run of text tokens inside a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextSpan {
    pub start: usize,
    pub len: usize,
    pub causal: bool,
}

impl TextSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Segment structure of one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    gen: Range<usize>,
    det: Range<usize>,
    text_spans: Vec<TextSpan>,
    total: usize,
}

impl SeqLayout {
    /// Validates that the segments are disjoint and tile `0..total` exactly.
    pub fn new(gen: Range<usize>, det: Range<usize>, text_spans: Vec<TextSpan>) -> Result<Self> {
        let mut pieces: Vec<Range<usize>> = Vec::new();
        if !gen.is_empty() {
            pieces.push(gen.clone());
        }
        if !det.is_empty() {
            pieces.push(det.clone());
        }
        for span in &text_spans {
            if span.len == 0 {
                return Err(Error::Layout("empty text span".into()));
            }
            pieces.push(span.range());
        }
        pieces.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for p in &pieces {
            if p.start != cursor {
                return Err(Error::Layout(format!(
                    "segments overlap or leave a gap at index {cursor}"
                )));
            }
            cursor = p.end;
        }
        for w in text_spans.windows(2) {
            if w[1].start < w[0].start {
                return Err(Error::Layout("text spans out of order".into()));
            }
        }
        Ok(Self {
            gen,
            det,
            text_spans,
            total: cursor,
        })
    }

    /// `[z_gen | h_det | instruction | answer]`; `answer_len` may be zero.
    pub fn detection(n_gen: usize, n_det: usize, instruction_len: usize, answer_len: usize) -> Result<Self> {
        let text_start = n_gen + n_det;
        let mut spans = Vec::new();
        if instruction_len > 0 {
            spans.push(TextSpan {
                start: text_start,
                len: instruction_len,
                causal: true,
            });
        }
        if answer_len > 0 {
            spans.push(TextSpan {
                start: text_start + instruction_len,
                len: answer_len,
                causal: true,
            });
        }
        Self::new(0..n_gen, n_gen..n_gen + n_det, spans)
    }

    /// `[caption | latents]`; `caption_len` may be zero.
    pub fn generation(caption_len: usize, n_gen: usize) -> Result<Self> {
        let spans = if caption_len > 0 {
            vec![TextSpan {
                start: 0,
                len: caption_len,
                causal: true,
            }]
        } else {
            vec![]
        };
        Self::new(caption_len..caption_len + n_gen, 0..0, spans)
    }

    pub fn n_gen(&self) -> usize {
        self.gen.len()
    }

    pub fn n_det(&self) -> usize {
        self.det.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn gen_range(&self) -> Range<usize> {
        self.gen.clone()
    }

    pub fn det_range(&self) -> Range<usize> {
        self.det.clone()
    }

    pub fn text_spans(&self) -> &[TextSpan] {
        &self.text_spans
    }

    pub fn text_len(&self) -> usize {
        self.text_spans.iter().map(|s| s.len).sum()
    }
}

/// Switches that change which detection-sequence edges exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskOptions {
    /// Detection features (and text) may attend to the generation latents.
    pub smsa: bool,
    /// Detection features may attend to the instruction text.
    pub text_in_smsa: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            smsa: true,
            text_in_smsa: true,
        }
    }
}

/// Boolean `rows × cols` matrix; `true` means the row token may attend to
/// the column token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    fn blocked(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            allow: vec![false; n * n],
        }
    }

    fn open(&mut self, rows: Range<usize>, cols: Range<usize>) {
        for r in rows {
            for c in cols.clone() {
                self.allow[r * self.cols + c] = true;
            }
        }
    }

    fn open_causal(&mut self, region: Range<usize>) {
        for r in region.clone() {
            for c in region.start..=r {
                self.allow[r * self.cols + c] = true;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Rows `rows` of the mask, all columns.
    pub fn row_slice(&self, rows: Range<usize>) -> Self {
        Self {
            rows: rows.len(),
            cols: self.cols,
            allow: self.allow[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }

    /// Square sub-mask over the given token indices (in order).
    pub fn select(&self, keep: &[usize]) -> Self {
        let mut allow = Vec::with_capacity(keep.len() * keep.len());
        for &r in keep {
            for &c in keep {
                allow.push(self.get(r, c));
            }
        }
        Self {
            rows: keep.len(),
            cols: keep.len(),
            allow,
        }
    }

    /// `#`/`.` grid, one line per row.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for &a in self.row(r) {
                out.push(if a { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`AttentionMask::dump`].
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.trim().len());
        let mut allow = Vec::with_capacity(rows * cols);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.len() != cols {
                return Err(Error::Format(format!("mask line {} has {} cells, expected {cols}", i + 1, line.len())));
            }
            for ch in line.chars() {
                match ch {
                    '#' => allow.push(true),
                    '.' => allow.push(false),
                    other => return Err(Error::Format(format!("bad mask cell {other:?}"))),
                }
            }
        }
        Self::new(rows, cols, allow)
    }

    /// Checks that every row admits at least one column and, for square
    /// masks, that every token sees itself.
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !self.row(r).iter().any(|&a| a) {
                return Err(Error::Layout(format!("mask row {r} is empty")));
            }
            if self.rows == self.cols && !self.get(r, r) {
                return Err(Error::Layout(format!("mask diagonal missing at {r}")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.dump())
    }
}

/// Caption tokens are causal among themselves; latent tokens see every
/// latent and every caption token.
pub fn build_generation_mask(layout: &SeqLayout) -> Result<AttentionMask> {
    if layout.n_det() != 0 {
        return Err(Error::Layout(format!(
            "generation layout has {} detection tokens",
            layout.n_det()
        )));
    }
    if layout.n_gen() == 0 {
        return Err(Error::Layout("generation layout has no latent block".into()));
    }
    if layout.text_spans().len() > 1 {
        return Err(Error::Layout("generation layout takes a single caption span".into()));
    }
    let gen = layout.gen_range();
    let mut mask = AttentionMask::blocked(layout.total());
    if let Some(caption) = layout.text_spans().first() {
        if caption.start > gen.start {
            return Err(Error::Layout("caption must precede the latents".into()));
        }
        if caption.causal {
            mask.open_causal(caption.range());
        } else {
            mask.open(caption.range(), caption.range());
        }
        mask.open(gen.clone(), caption.range());
    }
    mask.open(gen.clone(), gen);
    Ok(mask)
}

/// Detection-task mask:
/// * `z_gen` rows see only `z_gen`;
/// * `h_det` rows see `z_gen` (when SMSA is on), `h_det`, and the
///   instruction span (when `text_in_smsa`), never the answer;
/// * text rows are causal over instruction+answer and see all visual
///   tokens (`z_gen` only when SMSA is on).
pub fn build_detection_mask(layout: &SeqLayout, opts: MaskOptions) -> Result<AttentionMask> {
    if layout.n_gen() == 0 {
        return Err(Error::Layout("detection layout is missing the generation latents".into()));
    }
    if layout.n_det() == 0 {
        return Err(Error::Layout("detection layout is missing the detection features".into()));
    }
    let spans = layout.text_spans();
    if spans.is_empty() {
        return Err(Error::Layout("detection layout is missing the instruction".into()));
    }
    if spans.len() > 2 {
        return Err(Error::Layout("detection layout takes instruction and answer spans only".into()));
    }
    let (gen, det) = (layout.gen_range(), layout.det_range());
    if !(gen.end <= det.start && det.end <= spans[0].start) {
        return Err(Error::Layout("detection order must be z_gen, h_det, text".into()));
    }
    let instruction = spans[0].range();
    let text = instruction.start..spans.last().unwrap().range().end;

    let mut mask = AttentionMask::blocked(layout.total());
    mask.open(gen.clone(), gen.clone());

    mask.open(det.clone(), det.clone());
    if opts.smsa {
        mask.open(det.clone(), gen.clone());
    }
    if opts.text_in_smsa {
        mask.open(det.clone(), instruction);
    }

    mask.open_causal(text.clone());
    mask.open(text.clone(), det);
    if opts.smsa {
        mask.open(text, gen);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&str]) -> AttentionMask {
        AttentionMask::parse(&rows.join("\n")).unwrap()
    }

    #[test]
    fn generation_two_caption_two_latent() {
        let m = build_generation_mask(&SeqLayout::generation(2, 2).unwrap()).unwrap();
        assert_eq!(m, grid(&["#...", "##..", "####", "####"]));
    }

    #[test]
    fn generation_minimal() {
        let m = build_generation_mask(&SeqLayout::generation(1, 1).unwrap()).unwrap();
        assert_eq!(m, grid(&["#.", "##"]));
    }

    #[test]
    fn generation_without_caption_is_bidirectional() {
        let m = build_generation_mask(&SeqLayout::generation(0, 3).unwrap()).unwrap();
        assert_eq!(m, AttentionMask::full(3, 3));
    }

    #[test]
    fn generation_rejects_detection_tokens() {
        let layout = SeqLayout::detection(2, 1, 1, 0).unwrap();
        assert!(matches!(build_generation_mask(&layout), Err(Error::Layout(_))));
    }

    #[test]
    fn detection_one_of_each() {
        let m = build_detection_mask(&SeqLayout::detection(1, 1, 1, 0).unwrap(), MaskOptions::default()).unwrap();
        assert_eq!(m, grid(&["#..", "###", "###"]));
    }

    #[test]
    fn detection_without_det_tokens_is_rejected() {
        let layout = SeqLayout::detection(2, 0, 1, 0).unwrap();
        assert!(matches!(
            build_detection_mask(&layout, MaskOptions::default()),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn detection_text_is_causal() {
        let m = build_detection_mask(&SeqLayout::detection(1, 1, 2, 0).unwrap(), MaskOptions::default()).unwrap();
        // first text token (index 2) cannot see the second (index 3)
        assert!(!m.get(2, 3));
        assert!(m.get(3, 2));
    }

    #[test]
    fn detection_features_never_see_the_answer() {
        let layout = SeqLayout::detection(2, 2, 2, 3).unwrap();
        let m = build_detection_mask(&layout, MaskOptions::default()).unwrap();
        for r in layout.det_range() {
            for c in 6..9 {
                assert!(!m.get(r, c));
            }
            for c in 4..6 {
                assert!(m.get(r, c));
            }
        }
    }

    #[test]
    fn smsa_off_hides_latents_from_everything_else() {
        let layout = SeqLayout::detection(3, 2, 2, 1).unwrap();
        let opts = MaskOptions {
            smsa: false,
            text_in_smsa: true,
        };
        let m = build_detection_mask(&layout, opts).unwrap();
        for r in 3..layout.total() {
            for c in layout.gen_range() {
                assert!(!m.get(r, c));
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn text_switch_hides_instruction_from_detection_rows() {
        let layout = SeqLayout::detection(1, 2, 2, 0).unwrap();
        let opts = MaskOptions {
            smsa: true,
            text_in_smsa: false,
        };
        let m = build_detection_mask(&layout, opts).unwrap();
        assert_eq!(m, grid(&["#....", "###..", "###..", "####.", "#####"]));
    }

    #[test]
    fn layout_rejects_overlap() {
        let span = TextSpan {
            start: 1,
            len: 2,
            causal: true,
        };
        assert!(SeqLayout::new(0..2, 0..0, vec![span]).is_err());
    }

    #[test]
    fn dump_parse_round_trip() {
        let m = build_detection_mask(&SeqLayout::detection(2, 3, 2, 2).unwrap(), MaskOptions::default()).unwrap();
        assert_eq!(AttentionMask::parse(&m.dump()).unwrap(), m);
    }
}
