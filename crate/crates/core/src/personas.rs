//! Agent identities and panel composition.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PanelError {
    #[error("persona name and focus directive must be non-empty")]
    EmptyPersona,
    #[error("a panel needs between {min} and {max} members, got {got}")]
    BadSize { min: usize, max: usize, got: usize },
    #[error("duplicate persona name {0:?}")]
    DuplicateName(String),
    #[error("random panels need a pool of at least 2 personas, got {0}")]
    PoolTooSmall(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPersona")]
pub struct Persona {
    name: String,
    focus: String,
}

#[derive(Deserialize)]
struct RawPersona {
    name: String,
    focus: String,
}

impl TryFrom<RawPersona> for Persona {
    type Error = PanelError;

    fn try_from(raw: RawPersona) -> Result<Self, Self::Error> {
        Persona::new(raw.name, raw.focus)
    }
}

impl Persona {
    pub fn new(name: impl Into<String>, focus: impl Into<String>) -> Result<Self, PanelError> {
        let (name, focus) = (name.into(), focus.into());
        if name.trim().is_empty() || focus.trim().is_empty() {
            return Err(PanelError::EmptyPersona);
        }
        Ok(Self { name, focus })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The "You should ..." directive.
    pub fn focus(&self) -> &str {
        &self.focus
    }
}

pub const MIN_PANEL: usize = 1;
pub const MAX_PANEL: usize = 8;

/// Ordered panel members with pairwise distinct names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Persona>", into = "Vec<Persona>")]
pub struct Panel {
    members: Vec<Persona>,
}

impl TryFrom<Vec<Persona>> for Panel {
    type Error = PanelError;

    fn try_from(members: Vec<Persona>) -> Result<Self, Self::Error> {
        Panel::new(members)
    }
}

impl From<Panel> for Vec<Persona> {
    fn from(p: Panel) -> Self {
        p.members
    }
}

impl Panel {
    pub fn new(members: Vec<Persona>) -> Result<Self, PanelError> {
        if !(MIN_PANEL..=MAX_PANEL).contains(&members.len()) {
            return Err(PanelError::BadSize {
                min: MIN_PANEL,
                max: MAX_PANEL,
                got: members.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(m.name.as_str()) {
                return Err(PanelError::DuplicateName(m.name.clone()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Persona] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Panel holding only the first member.
    pub fn first_only(&self) -> Panel {
        Panel {
            members: self.members[..1].to_vec(),
        }
    }
}

fn persona(name: &str, focus: &str) -> Persona {
    Persona {
        name: name.into(),
        focus: focus.into(),
    }
}

/// The five scientists and their prompt focus.
pub fn default_panel() -> Panel {
    Panel {
        members: alloc::vec![
            persona(
                "Albert Einstein",
                "Explore alternative interpretations and conceptual frameworks"
            ),
            persona(
                "Isaac Newton",
                "Verify numerical relationships and logical consistency"
            ),
            persona(
                "Marie Curie",
                "Validate with experimental evidence and practical tests"
            ),
            persona(
                "Alan Turing",
                "Analyze problem structure and optimize solution efficiency"
            ),
            persona(
                "Nikola Tesla",
                "Synthesize diverse perspectives into coherent solutions"
            ),
        ],
    }
}

/// Five non-scientist professions used to check that the persona wording
/// is not what drives results.
pub fn alternative_panel() -> Panel {
    Panel {
        members: alloc::vec![
            persona("Doctor", "Check conclusions against practical diagnostic rigor"),
            persona("Artist", "Look for patterns and framings that others may overlook"),
            persona("Researcher", "Ground every claim in the available evidence"),
            persona(
                "Social Influencer",
                "Test the answer against how a broad audience would read the question"
            ),
            persona(
                "Entrepreneur",
                "Pursue the most practical and decisive route to an answer"
            ),
        ],
    }
}

/// Draws 2 to 5 members (capped at the pool size) without replacement.
/// Members keep their pool order.
pub fn random_panel(seed: u64, pool: &Panel) -> Result<Panel, PanelError> {
    if pool.len() < 2 {
        return Err(PanelError::PoolTooSmall(pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(2..=5usize).min(pool.len());
    let mut picked = index::sample(&mut rng, pool.len(), size).into_vec();
    picked.sort_unstable();
    Ok(Panel {
        members: picked.into_iter().map(|i| pool.members[i].clone()).collect(),
    })
}
