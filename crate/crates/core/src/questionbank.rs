//! Question templates and answer-option construction.
//!
//! The built-in bank lives in `resources/questions_v1.txt`; a replacement
//! file in the same format can be loaded with [`QuestionBank::load`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimuli::patch::POSITIONS;

const BUILTIN: &str = include_str!("../resources/questions_v1.txt");
pub const TEMPLATES_PER_CELL: usize = 8;
pub const NO_ANSWER: &str = "no answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Color,
    Shape,
    Semantic,
    PatchCross,
    PatchSelf,
    PatchMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    YesNo,
    #[serde(rename = "choice_1_2")]
    Choice12,
    PatchPosition,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Color,
        Category::Shape,
        Category::Semantic,
        Category::PatchCross,
        Category::PatchSelf,
        Category::PatchMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Shape => "shape",
            Category::Semantic => "semantic",
            Category::PatchCross => "patch_cross",
            Category::PatchSelf => "patch_self",
            Category::PatchMask => "patch_mask",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn is_patch(self) -> bool {
        matches!(self, Category::PatchCross | Category::PatchSelf | Category::PatchMask)
    }

    /// Formats that exist for this category.
    pub fn formats(self) -> &'static [Format] {
        if self.is_patch() {
            &[Format::PatchPosition]
        } else {
            &[Format::YesNo, Format::Choice12]
        }
    }
}

impl Format {
    pub const ALL: [Format; 3] = [Format::YesNo, Format::Choice12, Format::PatchPosition];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::YesNo => "yes_no",
            Format::Choice12 => "choice_1_2",
            Format::PatchPosition => "patch_position",
        }
    }

    pub fn parse(s: &str) -> Option<Format> {
        Format::ALL.into_iter().find(|f| f.as_str() == s)
    }

    pub fn option_count(self) -> usize {
        match self {
            Format::YesNo => 2,
            Format::Choice12 | Format::PatchPosition => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QuestionError {
    #[error("no question templates for ({0}, {1})")]
    UnknownCell(Category, Format),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("patch position {0} outside 1..=16")]
    PositionOutOfRange(u8),
    #[error("ground truth {truth:?} cannot be expressed in format {format}")]
    TruthMismatch { truth: Truth, format: Format },
    #[error("not enough untouched positions to draw a distractor")]
    NoDistractor,
    #[error("reading question bank: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub category: Category,
    pub format: Format,
    pub text: String,
    /// A "yes" answer to this template means the samples differ.
    pub inverted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionBank {
    cells: BTreeMap<(Category, Format), Vec<QuestionTemplate>>,
}

impl QuestionBank {
    pub fn builtin() -> &'static QuestionBank {
        static BANK: OnceLock<QuestionBank> = OnceLock::new();
        BANK.get_or_init(|| QuestionBank::parse(BUILTIN).expect("built-in question bank is well formed"))
    }

    pub fn load(path: &Path) -> Result<QuestionBank, QuestionError> {
        let text = std::fs::read_to_string(path).map_err(|e| QuestionError::Io(format!("{}: {e}", path.display())))?;
        QuestionBank::parse(&text)
    }

    pub fn parse(text: &str) -> Result<QuestionBank, QuestionError> {
        let mut cells: BTreeMap<(Category, Format), Vec<QuestionTemplate>> = BTreeMap::new();
        let mut current = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            let err = |message: String| QuestionError::Parse { line: i + 1, message };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let mut parts = header.split_whitespace();
                let (Some(c), Some(f), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(err(format!("malformed section header {line:?}")));
                };
                let category = Category::parse(c).ok_or_else(|| err(format!("unknown category {c:?}")))?;
                let format = Format::parse(f).ok_or_else(|| err(format!("unknown format {f:?}")))?;
                if !category.formats().contains(&format) {
                    return Err(err(format!("format {format} does not apply to {category}")));
                }
                cells.entry((category, format)).or_default();
                current = Some((category, format));
                continue;
            }
            let Some((category, format)) = current else {
                return Err(err("template outside of any section".into()));
            };
            let (inverted, text) = match line.strip_prefix('!') {
                Some(rest) => (true, rest),
                None => (false, line),
            };
            if inverted && format != Format::YesNo {
                return Err(err("only yes/no templates can be inverted".into()));
            }
            let cell = cells.entry((category, format)).or_default();
            cell.push(QuestionTemplate {
                id: format!("{category}.{format}.{}", cell.len() + 1),
                category,
                format,
                text: text.to_string(),
                inverted,
            });
        }
        if let Some(((c, f), _)) = cells.iter().find(|(_, v)| v.is_empty()) {
            return Err(QuestionError::Parse { line: 0, message: format!("section ({c}, {f}) is empty") });
        }
        Ok(QuestionBank { cells })
    }

    pub fn templates(&self, category: Category, format: Format) -> Result<&[QuestionTemplate], QuestionError> {
        self.cells
            .get(&(category, format))
            .map(Vec::as_slice)
            .ok_or(QuestionError::UnknownCell(category, format))
    }

    /// Uniform draw over the cell's templates.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        category: Category,
        format: Format,
        rng: &mut R,
    ) -> Result<&QuestionTemplate, QuestionError> {
        let cell = self.templates(category, format)?;
        Ok(&cell[rng.gen_range(0..cell.len())])
    }

    /// The fixed template used for examination queries: the first of the cell.
    pub fn canonical(&self, category: Category, format: Format) -> Result<&QuestionTemplate, QuestionError> {
        Ok(&self.templates(category, format)?[0])
    }

    pub fn cells(&self) -> impl Iterator<Item = (Category, Format)> + '_ {
        self.cells.keys().copied()
    }

    pub fn find(&self, id: &str) -> Option<&QuestionTemplate> {
        self.cells.values().flatten().find(|t| t.id == id)
    }
}

pub fn sample_question<R: Rng + ?Sized>(
    category: Category,
    format: Format,
    rng: &mut R,
) -> Result<&'static QuestionTemplate, QuestionError> {
    QuestionBank::builtin().sample(category, format, rng)
}

/// Ground truth of a record, before it is rendered into option strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Yes,
    No,
    Sample1,
    Sample2,
    NoAnswer,
    /// `answer` positions are correct; distractors avoid every `touched` position.
    Patch { answer: Vec<u8>, touched: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOptions {
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl AnswerOptions {
    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }
}

/// `"patch 7"` or, for a pair, `"patches 3 and 14"` (ascending).
pub fn position_label(positions: &[u8]) -> String {
    let mut p = positions.to_vec();
    p.sort_unstable();
    match p.as_slice() {
        [one] => format!("patch {one}"),
        [a, b] => format!("patches {a} and {b}"),
        many => {
            let list: Vec<String> = many.iter().map(u8::to_string).collect();
            format!("patches {}", list.join(", "))
        }
    }
}

pub fn build_options<R: Rng + ?Sized>(format: Format, truth: &Truth, rng: &mut R) -> Result<AnswerOptions, QuestionError> {
    let mismatch = || QuestionError::TruthMismatch { truth: truth.clone(), format };
    match format {
        Format::YesNo => {
            let answer_index = match truth {
                Truth::Yes => 0,
                Truth::No => 1,
                _ => return Err(mismatch()),
            };
            Ok(AnswerOptions { options: vec!["yes".into(), "no".into()], answer_index })
        }
        Format::Choice12 => {
            let answer_index = match truth {
                Truth::Sample1 => 0,
                Truth::Sample2 => 1,
                Truth::NoAnswer => 2,
                _ => return Err(mismatch()),
            };
            Ok(AnswerOptions {
                options: vec!["Sample 1".into(), "Sample 2".into(), NO_ANSWER.into()],
                answer_index,
            })
        }
        Format::PatchPosition => {
            let Truth::Patch { answer, touched } = truth else {
                return Err(mismatch());
            };
            if answer.is_empty() {
                return Err(mismatch());
            }
            if let Some(&bad) = answer.iter().chain(touched).find(|&&p| p == 0 || p > POSITIONS) {
                return Err(QuestionError::PositionOutOfRange(bad));
            }
            let free: Vec<u8> = (1..=POSITIONS)
                .filter(|p| !touched.contains(p) && !answer.contains(p))
                .collect();
            if free.len() < answer.len() {
                return Err(QuestionError::NoDistractor);
            }
            let distractor: Vec<u8> = sample(rng, free.len(), answer.len())
                .into_iter()
                .map(|i| free[i])
                .collect();
            let truth_first = rng.gen_bool(0.5);
            let (a, b) = (position_label(answer), position_label(&distractor));
            let (options, answer_index) = if truth_first {
                (vec![a, b, NO_ANSWER.into()], 0)
            } else {
                (vec![b, a, NO_ANSWER.into()], 1)
            };
            Ok(AnswerOptions { options, answer_index })
        }
    }
}

/// Prompt shown to the model: the question followed by the option list in order.
pub fn format_prompt(question: &str, options: &[String]) -> String {
    format!("{question}\nOptions: {}", options.join(", "))
}
