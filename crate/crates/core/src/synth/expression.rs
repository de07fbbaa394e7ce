//! Closed vocabulary, expression templates, and the resolver that checks an
//! expression against a scene.

use std::fmt::Write as _;
use std::path::Path;

use super::{Color, Object, Scene, ShapeKind};
use crate::encoders::{PAD_ID, UNK_ID};
use crate::error::{Error, Result};

/// Minimum size gap (px) for "large"/"small" to be unambiguous.
pub const SIZE_MARGIN: f64 = 4.0;
/// Minimum center gap (px) for positional words to be unambiguous.
pub const POSITION_MARGIN: f64 = 6.0;

const ORDINALS: [&str; 5] = ["first", "second", "third", "fourth", "fifth"];
const DIRECTIONS: [&str; 4] = ["left", "right", "top", "bottom"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Every word the templates can emit, after the reserved PAD/UNK ids.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(ShapeKind::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(["large", "small", "on", "the", "from"].map(String::from));
        tokens.extend(DIRECTIONS.map(String::from));
        tokens.extend(ORDINALS.map(String::from));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.iter().position(|t| t == word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// Newline-delimited tokens; line index is the token id.
    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{t}").expect("string write");
        }
        s
    }

    pub fn from_file_contents(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 {
            return Err(Error::Format {
                what: "vocabulary",
                reason: "missing reserved PAD/UNK entries".into(),
            });
        }
        debug_assert!(PAD_ID == 0 && UNK_ID == 1);
        Ok(Self { tokens })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_contents(&text)
    }
}

fn same_kind(objects: &[Object], color: Color, shape: ShapeKind) -> Vec<usize> {
    (0..objects.len())
        .filter(|&i| objects[i].color == color && objects[i].shape == shape)
        .collect()
}

/// Indices in `group` whose key is extreme (lowest) by at least `margin`;
/// returns every index within `margin` of the extreme when it is not unique.
fn extreme(group: &[usize], key: impl Fn(usize) -> f64, margin: f64) -> Vec<usize> {
    let Some(best) = group.iter().map(|&i| key(i)).reduce(f64::min) else {
        return Vec::new();
    };
    group.iter().copied().filter(|&i| key(i) < best + margin).collect()
}

/// Objects an expression designates. Unique reference means exactly one index.
pub fn resolve(words: &[&str], objects: &[Object]) -> Vec<usize> {
    let color = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
    let shape = |w: &str| ShapeKind::ALL.into_iter().find(|s| s.word() == w);
    match words {
        [c, s] => match (color(c), shape(s)) {
            (Some(c), Some(s)) => same_kind(objects, c, s),
            _ => Vec::new(),
        },
        [size, c, s] => match (color(c), shape(s)) {
            (Some(c), Some(s)) => {
                let group = same_kind(objects, c, s);
                match *size {
                    "large" => extreme(&group, |i| -objects[i].size, SIZE_MARGIN),
                    "small" => extreme(&group, |i| objects[i].size, SIZE_MARGIN),
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        },
        [c, s, "on", "the", dir] => match (color(c), shape(s)) {
            (Some(c), Some(s)) => {
                let group = same_kind(objects, c, s);
                match *dir {
                    "left" => extreme(&group, |i| objects[i].center.0, POSITION_MARGIN),
                    "right" => extreme(&group, |i| -objects[i].center.0, POSITION_MARGIN),
                    "top" => extreme(&group, |i| objects[i].center.1, POSITION_MARGIN),
                    "bottom" => extreme(&group, |i| -objects[i].center.1, POSITION_MARGIN),
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        },
        [ord, s, "from", "the", "left"] => {
            let (Some(rank), Some(s)) = (ORDINALS.iter().position(|o| o == ord), shape(s)) else {
                return Vec::new();
            };
            let mut group: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].shape == s).collect();
            group.sort_by(|&a, &b| objects[a].center.0.total_cmp(&objects[b].center.0));
            let separated = group
                .windows(2)
                .all(|w| objects[w[1]].center.0 - objects[w[0]].center.0 >= POSITION_MARGIN);
            match group.get(rank) {
                Some(&i) if separated => vec![i],
                Some(_) => group,
                None => Vec::new(),
            }
        }
        _ => Vec::new(),
    }
}

/// Candidate phrasings for `objects[target]`, shortest first.
fn candidates(objects: &[Object], target: usize) -> Vec<String> {
    let o = &objects[target];
    let (c, s) = (o.color.word(), o.shape.word());
    let mut out = vec![format!("{c} {s}")];
    for size in ["large", "small"] {
        out.push(format!("{size} {c} {s}"));
    }
    for dir in DIRECTIONS {
        out.push(format!("{c} {s} on the {dir}"));
    }
    for ord in ORDINALS {
        out.push(format!("{ord} {s} from the left"));
    }
    out
}

/// Shortest template that designates `target` and nothing else.
pub fn describe(objects: &[Object], target: usize) -> Option<String> {
    candidates(objects, target).into_iter().find(|text| {
        let words: Vec<&str> = text.split_whitespace().collect();
        resolve(&words, objects) == [target]
    })
}

/// Token ids of the scene's referring expression.
pub fn generate_expression(scene: &Scene, vocab: &Vocabulary) -> Result<Vec<usize>> {
    describe(&scene.objects, scene.referent_index)
        .map(|text| vocab.encode(&text))
        .ok_or_else(|| Error::Generation("no template identifies the referent".into()))
}
