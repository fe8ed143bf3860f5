//! The four built-in disease transition structures and their emission maps.
//!
//! Each chain is a small Markov model whose free transition probabilities are
//! governed by logistic regressions. Cells fixed at zero are structural:
//! they encode the disease biology (for example, a chronic infection is never
//! cleared) and are represented explicitly so row normalization can never
//! move mass into a forbidden cell.

use crate::error::{Error, Result};
use crate::hmm::{LikelihoodVector, ObservationSymbol, StateSpace};

/// One of the four transition-structure families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiseaseKind {
    /// Four states: no infection, new infection, old infection, recovered
    /// (uninfected but previously infected).
    Bartonella,
    /// Three states: no infection, acute infection, chronic infection.
    /// Infection is absorbing.
    Babesia,
    /// Same structure as `Babesia`; state 3 means antibodies without disease.
    Cowpox,
    /// Two states, fully observed: uninfected, infected.
    Anaplasma,
}

impl DiseaseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bartonella" => Ok(Self::Bartonella),
            "babesia" => Ok(Self::Babesia),
            "cowpox" => Ok(Self::Cowpox),
            "anaplasma" => Ok(Self::Anaplasma),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bartonella => "bartonella",
            Self::Babesia => "babesia",
            Self::Cowpox => "cowpox",
            Self::Anaplasma => "anaplasma",
        }
    }
}

/// One cell of the transition structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransitionCell {
    /// Fixed at exactly zero by the disease biology.
    StructuralZero,
    /// A constant probability (1.0 in the built-in structures).
    Fixed(f64),
    /// A logistic-regression probability with its own intercept and a shared
    /// slope group.
    Link { intercept: usize, group: usize },
    /// One minus the row's link probability.
    Complement,
}

/// A link cell together with its row context, precomputed for matrix
/// assembly.
#[derive(Debug, Clone)]
pub struct LinkCell {
    pub row: usize,
    pub col: usize,
    pub intercept: usize,
    pub group: usize,
    pub complement_col: usize,
    /// Transition label in 1-based state indices, e.g. "p12".
    pub label: String,
}

/// A chain's state space, emission map, transition structure and parameter
/// sharing.
#[derive(Debug, Clone)]
pub struct DiseaseSpec {
    name: String,
    kind: DiseaseKind,
    states: StateSpace,
    state_symbols: Vec<ObservationSymbol>,
    cells: Vec<TransitionCell>,
    links: Vec<LinkCell>,
    groups: Vec<String>,
    fixed_cells: Vec<(usize, usize, f64)>,
    emission_negative: Vec<f64>,
    emission_positive: Vec<f64>,
    emission_missing: Vec<f64>,
}

impl DiseaseSpec {
    /// Builds and validates a spec. Each row must hold either exactly one
    /// `Link` plus exactly one `Complement`, or only `Fixed`/`StructuralZero`
    /// cells summing to one.
    pub fn new<S: Into<String>>(
        name: S,
        kind: DiseaseKind,
        states: StateSpace,
        state_symbols: Vec<ObservationSymbol>,
        cells: Vec<TransitionCell>,
        groups: Vec<S>,
    ) -> Result<Self> {
        let name = name.into();
        let groups: Vec<String> = groups.into_iter().map(Into::into).collect();
        let s = states.size();
        if state_symbols.len() != s {
            return Err(Error::DimensionMismatch {
                what: "state emission symbols",
                expected: s,
                got: state_symbols.len(),
            });
        }
        if state_symbols.iter().any(|sym| sym.is_missing()) {
            return Err(Error::InvalidSpec("a state cannot emit `missing`".into()));
        }
        if cells.len() != s * s {
            return Err(Error::DimensionMismatch {
                what: "transition cells",
                expected: s * s,
                got: cells.len(),
            });
        }

        let mut links = Vec::new();
        let mut fixed_cells = Vec::new();
        for row in 0..s {
            let row_cells = &cells[row * s..(row + 1) * s];
            let link_cols: Vec<usize> = (0..s)
                .filter(|&c| matches!(row_cells[c], TransitionCell::Link { .. }))
                .collect();
            let comp_cols: Vec<usize> = (0..s)
                .filter(|&c| matches!(row_cells[c], TransitionCell::Complement))
                .collect();
            match (link_cols.len(), comp_cols.len()) {
                (1, 1) => {
                    let col = link_cols[0];
                    let TransitionCell::Link { intercept, group } = row_cells[col] else {
                        unreachable!()
                    };
                    if group >= groups.len() {
                        return Err(Error::InvalidSpec(format!(
                            "row {row} references slope group {group} out of range"
                        )));
                    }
                    links.push(LinkCell {
                        row,
                        col,
                        intercept,
                        group,
                        complement_col: comp_cols[0],
                        label: format!("p{}{}", row + 1, col + 1),
                    });
                }
                (0, 0) => {
                    let sum: f64 = row_cells
                        .iter()
                        .map(|c| match c {
                            TransitionCell::Fixed(v) => *v,
                            _ => 0.0,
                        })
                        .sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::InvalidSpec(format!(
                            "fixed row {row} sums to {sum}, expected 1"
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "row {row} must hold one link and one complement, or fixed cells only"
                    )));
                }
            }
            for (c, cell) in row_cells.iter().enumerate() {
                if let TransitionCell::Fixed(v) = cell {
                    if !(0.0..=1.0).contains(v) {
                        return Err(Error::InvalidSpec(format!(
                            "fixed cell ({row},{c}) outside [0,1]"
                        )));
                    }
                    fixed_cells.push((row, c, *v));
                }
            }
        }

        links.sort_by_key(|l| l.intercept);
        let mut seen = vec![false; links.len()];
        for l in &links {
            if l.intercept >= links.len() || seen[l.intercept] {
                return Err(Error::InvalidSpec("intercept ids must be unique and dense".into()));
            }
            seen[l.intercept] = true;
        }

        let emission = |want: ObservationSymbol| -> Vec<f64> {
            state_symbols
                .iter()
                .map(|&sym| f64::from(sym == want))
                .collect()
        };
        let emission_negative = emission(ObservationSymbol::Negative);
        let emission_positive = emission(ObservationSymbol::Positive);
        LikelihoodVector::new(emission_negative.clone())?;
        LikelihoodVector::new(emission_positive.clone())?;

        Ok(Self {
            name,
            kind,
            states,
            state_symbols,
            cells,
            links,
            groups,
            fixed_cells,
            emission_negative,
            emission_positive,
            emission_missing: vec![1.0; s],
        })
    }

    /// The exact structure for one of the four studied diseases.
    pub fn builtin(kind: DiseaseKind) -> Self {
        use ObservationSymbol::{Negative as N, Positive as P};
        use TransitionCell::{Complement as C, Fixed, Link, StructuralZero as Z};
        match kind {
            DiseaseKind::Bartonella => Self::new(
                "bartonella",
                kind,
                StateSpace::new(vec![
                    "no_infection",
                    "new_infection",
                    "old_infection",
                    "past_infection",
                ])
                .unwrap(),
                vec![N, P, P, N],
                vec![
                    // contracting shares slopes between first infection (p12)
                    // and re-infection (p42); recovery shares between new
                    // (p24) and old (p34) infections. Only intercepts differ.
                    C, Link { intercept: 0, group: 0 }, Z, Z,
                    Z, Z, C, Link { intercept: 1, group: 1 },
                    Z, Z, C, Link { intercept: 2, group: 1 },
                    Z, Link { intercept: 3, group: 0 }, Z, C,
                ],
                vec!["contract", "recover"],
            )
            .unwrap(),
            DiseaseKind::Babesia => Self::new(
                "babesia",
                kind,
                StateSpace::new(vec!["no_infection", "acute_infection", "chronic_infection"])
                    .unwrap(),
                vec![N, P, P],
                vec![
                    C, Link { intercept: 0, group: 0 }, Z,
                    Z, Z, Fixed(1.0),
                    Z, Z, Fixed(1.0),
                ],
                vec!["contract"],
            )
            .unwrap(),
            DiseaseKind::Cowpox => Self::new(
                "cowpox",
                kind,
                StateSpace::new(vec!["naive", "active_infection", "antibodies_only"]).unwrap(),
                vec![N, P, P],
                vec![
                    C, Link { intercept: 0, group: 0 }, Z,
                    Z, Z, Fixed(1.0),
                    Z, Z, Fixed(1.0),
                ],
                vec!["contract"],
            )
            .unwrap(),
            DiseaseKind::Anaplasma => Self::new(
                "anaplasma",
                kind,
                StateSpace::new(vec!["no_infection", "infection"]).unwrap(),
                vec![N, P],
                vec![
                    C, Link { intercept: 0, group: 0 },
                    Link { intercept: 1, group: 1 }, C,
                ],
                vec!["contract", "recover"],
            )
            .unwrap(),
        }
    }

    /// Builtin structure looked up by kind name.
    pub fn builtin_named(kind: &str) -> Result<Self> {
        Ok(Self::builtin(DiseaseKind::parse(kind)?))
    }

    /// Renames the instance (e.g. the three bartonella species).
    pub fn with_name<S: Into<String>>(mut self, name: S) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DiseaseKind {
        self.kind
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    /// The observation each state produces when tested.
    pub fn state_symbol(&self, state: usize) -> ObservationSymbol {
        self.state_symbols[state]
    }

    /// Emission row for an observation; missing maps to all ones.
    pub fn emission(&self, obs: ObservationSymbol) -> &[f64] {
        match obs {
            ObservationSymbol::Negative => &self.emission_negative,
            ObservationSymbol::Positive => &self.emission_positive,
            ObservationSymbol::Missing => &self.emission_missing,
        }
    }

    /// Emission row as an owned, validated vector.
    pub fn emission_vector(&self, obs: ObservationSymbol) -> LikelihoodVector {
        LikelihoodVector::new(self.emission(obs).to_vec()).expect("validated at construction")
    }

    pub fn cell(&self, row: usize, col: usize) -> TransitionCell {
        self.cells[row * self.n_states() + col]
    }

    pub fn is_structural_zero(&self, row: usize, col: usize) -> bool {
        matches!(self.cell(row, col), TransitionCell::StructuralZero)
    }

    /// Link cells ordered by intercept id.
    pub fn links(&self) -> &[LinkCell] {
        &self.links
    }

    pub fn n_intercepts(&self) -> usize {
        self.links.len()
    }

    pub fn slope_groups(&self) -> &[String] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn fixed_cells(&self) -> &[(usize, usize, f64)] {
        &self.fixed_cells
    }

    /// Intercept coefficient name, e.g. "b0_12".
    pub fn intercept_name(&self, intercept: usize) -> String {
        let l = &self.links[intercept];
        format!("b0_{}{}", l.row + 1, l.col + 1)
    }

    /// Dense forward-backward cost of one step for this chain.
    pub fn dense_step_cost(&self) -> usize {
        self.n_states() * self.n_states()
    }
}

/// The six diseases of the study in dataset column order, with the
/// three bartonella species instantiated from the shared structure.
pub fn default_registry() -> Vec<DiseaseSpec> {
    vec![
        DiseaseSpec::builtin(DiseaseKind::Bartonella).with_name("dosh"),
        DiseaseSpec::builtin(DiseaseKind::Bartonella).with_name("grah"),
        DiseaseSpec::builtin(DiseaseKind::Bartonella).with_name("tay"),
        DiseaseSpec::builtin(DiseaseKind::Babesia).with_name("bab"),
        DiseaseSpec::builtin(DiseaseKind::Cowpox).with_name("cow"),
        DiseaseSpec::builtin(DiseaseKind::Anaplasma).with_name("ana"),
    ]
}
