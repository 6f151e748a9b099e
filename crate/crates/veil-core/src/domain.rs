//! Justice principles, income distributions, class draws, and payoff
//! arithmetic.
//!
//! Everything here is pure: operations take explicit inputs (including the
//! random stream) and return values without side effects, so a group run is
//! reproducible from its seed alone.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of income classes in every distribution.
pub const CLASS_COUNT: usize = 5;

/// Income-to-payoff conversion divisor (1 unit of payoff per 10,000 of income).
pub const PAYOFF_DIVISOR: f64 = 10_000.0;

/// Allowed range for the group-phase stake multiplier.
pub const SCALE_FACTOR_MIN: f64 = 2.0;
pub const SCALE_FACTOR_MAX: f64 = 6.0;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("distribution `{label}`: {reason}")]
    InvalidDistribution { label: String, reason: String },
    #[error("class probabilities invalid: {reason}")]
    InvalidProbabilities { reason: String },
    #[error("situation `{name}`: {reason}")]
    InvalidSituation { name: String, reason: String },
    #[error("{kind} requires a constraint value")]
    MissingConstraint { kind: PrincipleKind },
    #[error("{kind} does not take a constraint value")]
    UnexpectedConstraint { kind: PrincipleKind },
    #[error("constraint value must be non-negative, got {value}")]
    NegativeConstraint { value: f64 },
    #[error(
        "no distribution in `{situation}` satisfies {kind} with constraint {constraint}; {bound}"
    )]
    InfeasibleConstraint {
        situation: String,
        kind: PrincipleKind,
        constraint: f64,
        bound: String,
    },
    #[error("scale factor {factor} outside [{SCALE_FACTOR_MIN}, {SCALE_FACTOR_MAX}]")]
    ScaleOutOfRange { factor: f64 },
    #[error("unknown distribution label `{label}` in situation `{situation}`")]
    UnknownLabel { situation: String, label: String },
}

/// The four distributive-justice rules a group can adopt.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PrincipleKind {
    /// Maximize the income of the worst-off class.
    MaxFloor,
    /// Maximize the probability-weighted average income.
    MaxAverage,
    /// Maximize average income subject to a guaranteed minimum income.
    MaxAvgWithFloor,
    /// Maximize average income subject to a cap on the income range.
    MaxAvgWithRange,
}

impl PrincipleKind {
    pub const ALL: [PrincipleKind; 4] = [
        PrincipleKind::MaxFloor,
        PrincipleKind::MaxAverage,
        PrincipleKind::MaxAvgWithFloor,
        PrincipleKind::MaxAvgWithRange,
    ];

    pub fn requires_constraint(self) -> bool {
        matches!(
            self,
            PrincipleKind::MaxAvgWithFloor | PrincipleKind::MaxAvgWithRange
        )
    }

    /// Short code used in transcripts and scripted statements.
    pub fn code(self) -> &'static str {
        match self {
            PrincipleKind::MaxFloor => "P1",
            PrincipleKind::MaxAverage => "P2",
            PrincipleKind::MaxAvgWithFloor => "P3",
            PrincipleKind::MaxAvgWithRange => "P4",
        }
    }

    /// Stable identifier matching the serialized form.
    pub fn id(self) -> &'static str {
        match self {
            PrincipleKind::MaxFloor => "max_floor",
            PrincipleKind::MaxAverage => "max_average",
            PrincipleKind::MaxAvgWithFloor => "max_avg_with_floor",
            PrincipleKind::MaxAvgWithRange => "max_avg_with_range",
        }
    }

    pub fn from_id(id: &str) -> Option<PrincipleKind> {
        PrincipleKind::ALL.into_iter().find(|k| k.id() == id)
    }
}

impl fmt::Display for PrincipleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// A principle plus its constraint value, when the kind takes one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrinciple", into = "RawPrinciple")]
pub struct Principle {
    kind: PrincipleKind,
    constraint: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPrinciple {
    kind: PrincipleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraint: Option<f64>,
}

impl TryFrom<RawPrinciple> for Principle {
    type Error = DomainError;
    fn try_from(raw: RawPrinciple) -> Result<Self, DomainError> {
        Principle::new(raw.kind, raw.constraint)
    }
}

impl From<Principle> for RawPrinciple {
    fn from(p: Principle) -> Self {
        RawPrinciple {
            kind: p.kind,
            constraint: p.constraint,
        }
    }
}

impl Principle {
    pub fn new(kind: PrincipleKind, constraint: Option<f64>) -> Result<Principle, DomainError> {
        match (kind.requires_constraint(), constraint) {
            (true, None) => Err(DomainError::MissingConstraint { kind }),
            (false, Some(_)) => Err(DomainError::UnexpectedConstraint { kind }),
            (true, Some(v)) if v.is_nan() || v < 0.0 => {
                Err(DomainError::NegativeConstraint { value: v })
            }
            _ => Ok(Principle { kind, constraint }),
        }
    }

    pub fn max_floor() -> Principle {
        Principle {
            kind: PrincipleKind::MaxFloor,
            constraint: None,
        }
    }

    pub fn max_average() -> Principle {
        Principle {
            kind: PrincipleKind::MaxAverage,
            constraint: None,
        }
    }

    pub fn with_floor(floor: f64) -> Result<Principle, DomainError> {
        Principle::new(PrincipleKind::MaxAvgWithFloor, Some(floor))
    }

    pub fn with_range(range: f64) -> Result<Principle, DomainError> {
        Principle::new(PrincipleKind::MaxAvgWithRange, Some(range))
    }

    pub fn kind(&self) -> PrincipleKind {
        self.kind
    }

    pub fn constraint(&self) -> Option<f64> {
        self.constraint
    }

    /// Scales the constraint value along with a situation's incomes, so that
    /// feasibility is preserved when stakes are multiplied.
    pub fn scaled(&self, factor: f64) -> Principle {
        Principle {
            kind: self.kind,
            constraint: self.constraint.map(|c| c * factor),
        }
    }
}

impl fmt::Display for Principle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.constraint {
            Some(c) => write!(f, "{}({})", self.kind.id(), fmt_amount(c)),
            None => f.write_str(self.kind.id()),
        }
    }
}

/// Formats an income amount without trailing zeros for whole numbers.
pub fn fmt_amount(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Five class incomes, ordered from the lowest class to the highest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct IncomeDistribution {
    label: String,
    class_incomes: [f64; CLASS_COUNT],
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    label: String,
    class_incomes: [f64; CLASS_COUNT],
}

impl TryFrom<RawDistribution> for IncomeDistribution {
    type Error = DomainError;
    fn try_from(raw: RawDistribution) -> Result<Self, DomainError> {
        IncomeDistribution::new(raw.label, raw.class_incomes)
    }
}

impl From<IncomeDistribution> for RawDistribution {
    fn from(d: IncomeDistribution) -> Self {
        RawDistribution {
            label: d.label,
            class_incomes: d.class_incomes,
        }
    }
}

impl IncomeDistribution {
    pub fn new(
        label: impl Into<String>,
        class_incomes: [f64; CLASS_COUNT],
    ) -> Result<IncomeDistribution, DomainError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(DomainError::InvalidDistribution {
                label,
                reason: "label must be non-empty".into(),
            });
        }
        for (i, v) in class_incomes.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(DomainError::InvalidDistribution {
                    label,
                    reason: format!("class {i} income {v} is not a finite non-negative amount"),
                });
            }
        }
        if class_incomes.windows(2).any(|w| w[0] > w[1]) {
            return Err(DomainError::InvalidDistribution {
                label,
                reason: "class incomes must be non-decreasing from the lowest class".into(),
            });
        }
        Ok(IncomeDistribution {
            label,
            class_incomes,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn class_incomes(&self) -> &[f64; CLASS_COUNT] {
        &self.class_incomes
    }

    pub fn income_for_class(&self, class: usize) -> f64 {
        self.class_incomes[class]
    }

    /// Income of the worst-off class.
    pub fn floor(&self) -> f64 {
        self.class_incomes[0]
    }

    /// Spread between the best- and worst-off classes.
    pub fn range(&self) -> f64 {
        self.class_incomes[CLASS_COUNT - 1] - self.class_incomes[0]
    }
}

/// Probability of being assigned to each income class, low class first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbabilities", into = "RawProbabilities")]
pub struct ClassProbabilities {
    probs: [f64; CLASS_COUNT],
}

#[derive(Serialize, Deserialize)]
struct RawProbabilities {
    probs: [f64; CLASS_COUNT],
}

impl TryFrom<RawProbabilities> for ClassProbabilities {
    type Error = DomainError;
    fn try_from(raw: RawProbabilities) -> Result<Self, DomainError> {
        ClassProbabilities::new(raw.probs)
    }
}

impl From<ClassProbabilities> for RawProbabilities {
    fn from(p: ClassProbabilities) -> Self {
        RawProbabilities { probs: p.probs }
    }
}

impl Default for ClassProbabilities {
    fn default() -> Self {
        ClassProbabilities {
            probs: [0.05, 0.10, 0.50, 0.25, 0.10],
        }
    }
}

impl ClassProbabilities {
    pub fn new(probs: [f64; CLASS_COUNT]) -> Result<ClassProbabilities, DomainError> {
        for p in probs {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(DomainError::InvalidProbabilities {
                    reason: format!("probability {p} outside [0, 1]"),
                });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DomainError::InvalidProbabilities {
                reason: format!("probabilities sum to {sum}, expected 1"),
            });
        }
        Ok(ClassProbabilities { probs })
    }

    pub fn probs(&self) -> &[f64; CLASS_COUNT] {
        &self.probs
    }

    /// Maps a uniform variate in [0, 1) to a class index by CDF inversion.
    pub fn class_for_uniform(&self, u: f64) -> usize {
        let mut cumulative = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                return i;
            }
        }
        CLASS_COUNT - 1
    }
}

/// A named set of candidate income distributions sharing one probability
/// vector, optionally annotated with which distribution each principle
/// selects (used for the instructional presentation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSituation", into = "RawSituation")]
pub struct Situation {
    name: String,
    distributions: Vec<IncomeDistribution>,
    probabilities: ClassProbabilities,
    principle_hints: BTreeMap<PrincipleKind, String>,
}

#[derive(Serialize, Deserialize)]
struct RawSituation {
    name: String,
    distributions: Vec<IncomeDistribution>,
    probabilities: ClassProbabilities,
    #[serde(default)]
    principle_hints: BTreeMap<PrincipleKind, String>,
}

impl TryFrom<RawSituation> for Situation {
    type Error = DomainError;
    fn try_from(raw: RawSituation) -> Result<Self, DomainError> {
        Situation::new(
            raw.name,
            raw.distributions,
            raw.probabilities,
            raw.principle_hints,
        )
    }
}

impl From<Situation> for RawSituation {
    fn from(s: Situation) -> Self {
        RawSituation {
            name: s.name,
            distributions: s.distributions,
            probabilities: s.probabilities,
            principle_hints: s.principle_hints,
        }
    }
}

impl Situation {
    pub fn new(
        name: impl Into<String>,
        distributions: Vec<IncomeDistribution>,
        probabilities: ClassProbabilities,
        principle_hints: BTreeMap<PrincipleKind, String>,
    ) -> Result<Situation, DomainError> {
        let name = name.into();
        if distributions.is_empty() || distributions.len() > 8 {
            return Err(DomainError::InvalidSituation {
                name,
                reason: format!(
                    "expected between 1 and 8 distributions, got {}",
                    distributions.len()
                ),
            });
        }
        for (i, a) in distributions.iter().enumerate() {
            if distributions[i + 1..].iter().any(|b| b.label == a.label) {
                return Err(DomainError::InvalidSituation {
                    name,
                    reason: format!("duplicate distribution label `{}`", a.label),
                });
            }
        }
        for label in principle_hints.values() {
            if !distributions.iter().any(|d| d.label() == label) {
                return Err(DomainError::InvalidSituation {
                    name,
                    reason: format!("principle hint references unknown label `{label}`"),
                });
            }
        }
        Ok(Situation {
            name,
            distributions,
            probabilities,
            principle_hints,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn distributions(&self) -> &[IncomeDistribution] {
        &self.distributions
    }

    pub fn probabilities(&self) -> &ClassProbabilities {
        &self.probabilities
    }

    pub fn principle_hints(&self) -> &BTreeMap<PrincipleKind, String> {
        &self.principle_hints
    }

    pub fn distribution(&self, label: &str) -> Result<&IncomeDistribution, DomainError> {
        self.distributions
            .iter()
            .find(|d| d.label() == label)
            .ok_or_else(|| DomainError::UnknownLabel {
                situation: self.name.clone(),
                label: label.to_string(),
            })
    }
}

/// Probability-weighted mean income of a distribution.
pub fn weighted_average(dist: &IncomeDistribution, probs: &ClassProbabilities) -> f64 {
    dist.class_incomes
        .iter()
        .zip(probs.probs.iter())
        .map(|(income, p)| income * p)
        .sum()
}

/// Selects the distribution a principle picks in a situation.
///
/// Ties are broken by list position: the earliest qualifying distribution
/// wins. Constrained principles restrict the candidate set first; an empty
/// candidate set is reported as `InfeasibleConstraint` (callers are expected
/// to run [`validate_constraint`] beforehand).
pub fn evaluate_principle<'a>(
    principle: &Principle,
    situation: &'a Situation,
) -> Result<&'a str, DomainError> {
    let candidates: Vec<&IncomeDistribution> = match (principle.kind(), principle.constraint()) {
        (PrincipleKind::MaxFloor, _) | (PrincipleKind::MaxAverage, _) => {
            situation.distributions.iter().collect()
        }
        (PrincipleKind::MaxAvgWithFloor, Some(c)) => situation
            .distributions
            .iter()
            .filter(|d| d.floor() >= c)
            .collect(),
        (PrincipleKind::MaxAvgWithRange, Some(c)) => situation
            .distributions
            .iter()
            .filter(|d| d.range() <= c)
            .collect(),
        (kind, None) => return Err(DomainError::MissingConstraint { kind }),
    };
    if candidates.is_empty() {
        let constraint = principle.constraint().unwrap_or_default();
        let bound = achievable_bound(principle.kind(), situation);
        return Err(DomainError::InfeasibleConstraint {
            situation: situation.name.clone(),
            kind: principle.kind(),
            constraint,
            bound,
        });
    }
    let key = |d: &IncomeDistribution| -> f64 {
        match principle.kind() {
            PrincipleKind::MaxFloor => d.floor(),
            _ => weighted_average(d, &situation.probabilities),
        }
    };
    let mut best = candidates[0];
    for d in &candidates[1..] {
        if key(d) > key(best) {
            best = d;
        }
    }
    Ok(best.label())
}

fn achievable_bound(kind: PrincipleKind, situation: &Situation) -> String {
    match kind {
        PrincipleKind::MaxAvgWithFloor => {
            let max_floor = situation
                .distributions
                .iter()
                .map(IncomeDistribution::floor)
                .fold(f64::NEG_INFINITY, f64::max);
            format!("max achievable floor = {}", fmt_amount(max_floor))
        }
        PrincipleKind::MaxAvgWithRange => {
            let min_range = situation
                .distributions
                .iter()
                .map(IncomeDistribution::range)
                .fold(f64::INFINITY, f64::min);
            format!("min achievable range = {}", fmt_amount(min_range))
        }
        _ => String::new(),
    }
}

/// Outcome of checking a constrained principle against a situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ConstraintCheck {
    Ok,
    /// Infeasible as submitted; `achievable` is the bound the agent can be
    /// re-prompted with (max attainable floor, or min attainable range).
    Violation { achievable: f64, message: String },
}

impl ConstraintCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, ConstraintCheck::Ok)
    }
}

/// Checks whether at least one distribution satisfies a constrained
/// principle. Infeasibility is a classification, not a fault; the violation
/// carries the achievable bound so the agent can be re-prompted.
pub fn validate_constraint(
    principle: &Principle,
    situation: &Situation,
) -> Result<ConstraintCheck, DomainError> {
    let constraint = principle
        .constraint()
        .ok_or(DomainError::MissingConstraint {
            kind: principle.kind(),
        })?;
    if constraint.is_nan() || constraint < 0.0 {
        return Err(DomainError::NegativeConstraint { value: constraint });
    }
    let (feasible, achievable) = match principle.kind() {
        PrincipleKind::MaxAvgWithFloor => {
            let max_floor = situation
                .distributions
                .iter()
                .map(IncomeDistribution::floor)
                .fold(f64::NEG_INFINITY, f64::max);
            (max_floor >= constraint, max_floor)
        }
        PrincipleKind::MaxAvgWithRange => {
            let min_range = situation
                .distributions
                .iter()
                .map(IncomeDistribution::range)
                .fold(f64::INFINITY, f64::min);
            (min_range <= constraint, min_range)
        }
        kind => return Err(DomainError::UnexpectedConstraint { kind }),
    };
    if feasible {
        Ok(ConstraintCheck::Ok)
    } else {
        Ok(ConstraintCheck::Violation {
            achievable,
            message: achievable_bound(principle.kind(), situation),
        })
    }
}

/// Draws an income class, consuming exactly one uniform variate.
pub fn draw_income_class<R: Rng + ?Sized>(probs: &ClassProbabilities, rng: &mut R) -> usize {
    probs.class_for_uniform(rng.random::<f64>())
}

/// Currency amount in cents. Kept integral so balances stay exact.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Converts a dollar amount to cents, rounding half-up.
    pub fn from_dollars_half_up(dollars: f64) -> Money {
        // f64::round is half-away-from-zero, i.e. half-up for non-negatives.
        Money((dollars * 100.0).round() as i64)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

/// Payoff for a yearly income at the stated conversion rate, rounded to the
/// cent, half-up.
pub fn compute_payoff(income: f64, scale: f64) -> Money {
    assert!(income >= 0.0, "income must be non-negative, got {income}");
    assert!(scale >= 1.0, "scale must be >= 1, got {scale}");
    Money::from_dollars_half_up(income * scale / PAYOFF_DIVISOR)
}

/// Payoffs each candidate principle would have yielded at the same drawn
/// class. Sharing the draw across principles isolates the principle's effect.
pub fn counterfactual_payoffs(
    situation: &Situation,
    drawn_class: usize,
    choices: &[Principle],
    scale: f64,
) -> Result<BTreeMap<PrincipleKind, Money>, DomainError> {
    let mut out = BTreeMap::new();
    for principle in choices {
        let label = evaluate_principle(principle, situation)?;
        let income = situation.distribution(label)?.income_for_class(drawn_class);
        out.insert(principle.kind(), compute_payoff(income, scale));
    }
    Ok(out)
}

/// Result of applying a principle: the realized draw plus the payoffs every
/// configured principle would have produced under the same draw.
///
/// `principle` is absent only when the no-agreement fallback is configured
/// to draw a distribution directly instead of a principle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffOutcome {
    pub principle: Option<Principle>,
    pub selected_distribution: String,
    pub drawn_class: usize,
    pub income: f64,
    pub payoff: Money,
    pub counterfactuals: BTreeMap<PrincipleKind, Money>,
}

impl PayoffOutcome {
    /// Applies `principle` in `situation`, drawing the class from `rng` and
    /// computing counterfactuals for every principle in `choices`.
    pub fn realize<R: Rng + ?Sized>(
        principle: Principle,
        situation: &Situation,
        choices: &[Principle],
        scale: f64,
        rng: &mut R,
    ) -> Result<PayoffOutcome, DomainError> {
        let label = evaluate_principle(&principle, situation)?.to_string();
        Self::realize_with_label(Some(principle), label, situation, choices, scale, rng)
    }

    /// Pays out a directly drawn distribution (the fallback variant where no
    /// principle mediates the selection).
    pub fn realize_with_label<R: Rng + ?Sized>(
        principle: Option<Principle>,
        label: String,
        situation: &Situation,
        choices: &[Principle],
        scale: f64,
        rng: &mut R,
    ) -> Result<PayoffOutcome, DomainError> {
        let drawn_class = draw_income_class(situation.probabilities(), rng);
        let income = situation.distribution(&label)?.income_for_class(drawn_class);
        let payoff = compute_payoff(income, scale);
        let counterfactuals = counterfactual_payoffs(situation, drawn_class, choices, scale)?;
        Ok(PayoffOutcome {
            principle,
            selected_distribution: label,
            drawn_class,
            income,
            payoff,
            counterfactuals,
        })
    }
}

/// Multiplies every class income by `factor` (the group-phase stake raise).
/// Probabilities and labels are unchanged; the name is tagged with the factor.
pub fn scale_situation(situation: &Situation, factor: f64) -> Result<Situation, DomainError> {
    if !(SCALE_FACTOR_MIN..=SCALE_FACTOR_MAX).contains(&factor) {
        return Err(DomainError::ScaleOutOfRange { factor });
    }
    let distributions = situation
        .distributions
        .iter()
        .map(|d| {
            let mut incomes = *d.class_incomes();
            for v in &mut incomes {
                *v *= factor;
            }
            IncomeDistribution::new(d.label(), incomes)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Situation::new(
        format!("{}-x{}", situation.name, factor),
        distributions,
        situation.probabilities.clone(),
        situation.principle_hints.clone(),
    )
}

/// The situation dataset: named situations loaded from a JSON document and
/// validated at startup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationSet {
    situations: Vec<Situation>,
}

impl SituationSet {
    /// The dataset shipped with the crate (situations A-D plus the
    /// group-phase base situation G).
    pub fn embedded() -> SituationSet {
        serde_json::from_str(include_str!("../data/situations.json"))
            .expect("embedded situation dataset is valid")
    }

    pub fn from_json(text: &str) -> Result<SituationSet, serde_json::Error> {
        let set: SituationSet = serde_json::from_str(text)?;
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&Situation> {
        self.situations.iter().find(|s| s.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.situations.iter().map(Situation::name).collect()
    }

    pub fn situations(&self) -> &[Situation] {
        &self.situations
    }
}

/// Running account of symbolic payments, one delta per crediting phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BankBalance {
    total: Money,
    history: Vec<BalanceDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceDelta {
    pub phase: String,
    pub delta: Money,
}

impl BankBalance {
    pub fn new() -> BankBalance {
        BankBalance::default()
    }

    pub fn credit(&mut self, phase: impl Into<String>, delta: Money) {
        self.total += delta;
        self.history.push(BalanceDelta {
            phase: phase.into(),
            delta,
        });
    }

    pub fn total(&self) -> Money {
        self.total
    }

    pub fn history(&self) -> &[BalanceDelta] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dist(label: &str, incomes: [f64; 5]) -> IncomeDistribution {
        IncomeDistribution::new(label, incomes).unwrap()
    }

    /// The two-distribution situation used across the operation examples.
    fn situation_s() -> Situation {
        Situation::new(
            "S",
            vec![
                dist("D1", [10_000.0, 15_000.0, 20_000.0, 25_000.0, 30_000.0]),
                dist("D2", [5_000.0, 20_000.0, 30_000.0, 40_000.0, 50_000.0]),
            ],
            ClassProbabilities::default(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn single(label: &str, incomes: [f64; 5]) -> Situation {
        Situation::new(
            "solo",
            vec![dist(label, incomes)],
            ClassProbabilities::default(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn weighted_average_matches_dot_product() {
        let s = situation_s();
        let probs = ClassProbabilities::default();
        assert_eq!(weighted_average(&s.distributions()[0], &probs), 21_250.0);
        assert_eq!(weighted_average(&s.distributions()[1], &probs), 32_250.0);
    }

    #[test]
    fn weighted_average_of_constant_distribution_is_the_constant() {
        let d = dist("c", [7_000.0; 5]);
        let probs = ClassProbabilities::new([0.2, 0.3, 0.1, 0.15, 0.25]).unwrap();
        assert!((weighted_average(&d, &probs) - 7_000.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_principle_selects_per_rule() {
        let s = situation_s();
        assert_eq!(evaluate_principle(&Principle::max_floor(), &s).unwrap(), "D1");
        assert_eq!(
            evaluate_principle(&Principle::max_average(), &s).unwrap(),
            "D2"
        );
        assert_eq!(
            evaluate_principle(&Principle::with_floor(8_000.0).unwrap(), &s).unwrap(),
            "D1"
        );
        assert_eq!(
            evaluate_principle(&Principle::with_range(25_000.0).unwrap(), &s).unwrap(),
            "D1"
        );
    }

    #[test]
    fn single_distribution_situation_always_selected() {
        let s = single("only", [1_000.0, 2_000.0, 3_000.0, 4_000.0, 5_000.0]);
        for kind in PrincipleKind::ALL {
            let p = if kind.requires_constraint() {
                Principle::new(kind, Some(500.0)).unwrap()
            } else {
                Principle::new(kind, None).unwrap()
            };
            if validate_constraint(&p, &s).map(|c| c.is_ok()).unwrap_or(true) {
                assert_eq!(evaluate_principle(&p, &s).unwrap(), "only");
            }
        }
        // Unconstrained principles always pick the only candidate.
        assert_eq!(evaluate_principle(&Principle::max_floor(), &s).unwrap(), "only");
    }

    #[test]
    fn argmax_ties_break_by_list_position() {
        let s = Situation::new(
            "tie",
            vec![
                dist("first", [1_000.0, 1_000.0, 1_000.0, 1_000.0, 1_000.0]),
                dist("second", [1_000.0, 1_000.0, 1_000.0, 1_000.0, 1_000.0]),
            ],
            ClassProbabilities::default(),
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(evaluate_principle(&Principle::max_floor(), &s).unwrap(), "first");
        assert_eq!(
            evaluate_principle(&Principle::max_average(), &s).unwrap(),
            "first"
        );
    }

    #[test]
    fn infeasible_constraint_reported_with_bound() {
        let s = situation_s();
        let p = Principle::with_floor(99_000.0).unwrap();
        let err = evaluate_principle(&p, &s).unwrap_err();
        assert!(err.to_string().contains("max achievable floor = 10000"));
    }

    #[test]
    fn validate_constraint_examples() {
        let s = situation_s();
        assert!(validate_constraint(&Principle::with_floor(8_000.0).unwrap(), &s)
            .unwrap()
            .is_ok());
        match validate_constraint(&Principle::with_floor(99_000.0).unwrap(), &s).unwrap() {
            ConstraintCheck::Violation {
                achievable,
                message,
            } => {
                assert_eq!(achievable, 10_000.0);
                assert_eq!(message, "max achievable floor = 10000");
            }
            other => panic!("expected violation, got {other:?}"),
        }
        let constant = single("flat", [3_000.0; 5]);
        assert!(validate_constraint(&Principle::with_range(0.0).unwrap(), &constant)
            .unwrap()
            .is_ok());
    }

    #[test]
    fn negative_constraint_is_a_fault() {
        assert!(matches!(
            Principle::with_floor(-1.0),
            Err(DomainError::NegativeConstraint { .. })
        ));
    }

    #[test]
    fn constraint_presence_matches_kind() {
        assert!(matches!(
            Principle::new(PrincipleKind::MaxAvgWithFloor, None),
            Err(DomainError::MissingConstraint { .. })
        ));
        assert!(matches!(
            Principle::new(PrincipleKind::MaxFloor, Some(1.0)),
            Err(DomainError::UnexpectedConstraint { .. })
        ));
    }

    #[test]
    fn class_for_uniform_follows_cdf_table() {
        // Default probabilities give boundaries 0.05 / 0.15 / 0.65 / 0.90 /
        // 1.0. Points sit strictly inside each band (the exact boundary is
        // one ulp fuzzy under accumulated float addition).
        let probs = ClassProbabilities::default();
        let table = [
            (0.0, 0),
            (0.04, 0),
            (0.049, 0),
            (0.051, 1),
            (0.149, 1),
            (0.151, 2),
            (0.649, 2),
            (0.651, 3),
            (0.899, 3),
            (0.901, 4),
            (0.999, 4),
        ];
        for (u, class) in table {
            assert_eq!(probs.class_for_uniform(u), class, "u = {u}");
        }
    }

    #[test]
    fn degenerate_probabilities_always_draw_the_certain_class() {
        let probs = ClassProbabilities::new([1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(draw_income_class(&probs, &mut rng), 0);
        }
    }

    #[test]
    fn draw_consumes_exactly_one_variate() {
        let mut a = ChaCha12Rng::seed_from_u64(42);
        let mut b = ChaCha12Rng::seed_from_u64(42);
        let probs = ClassProbabilities::default();
        draw_income_class(&probs, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn seeded_draw_frequencies_converge() {
        let probs = ClassProbabilities::default();
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; CLASS_COUNT];
        for _ in 0..n {
            counts[draw_income_class(&probs, &mut rng)] += 1;
        }
        for (i, expected) in probs.probs().iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - expected).abs() < 0.01,
                "class {i}: {freq} vs {expected}"
            );
        }
    }

    #[test]
    fn payoff_examples() {
        assert_eq!(compute_payoff(20_000.0, 1.0), Money(200));
        assert_eq!(compute_payoff(0.0, 5.0), Money(0));
        // 12345 * 3 / 10000 = 3.7035 -> 3.70
        assert_eq!(compute_payoff(12_345.0, 3.0), Money(370));
    }

    #[test]
    fn payoff_rounds_half_up_at_the_cent() {
        // 50 / 10000 = 0.005 dollars = half a cent -> rounds up.
        assert_eq!(compute_payoff(50.0, 1.0), Money(1));
        assert_eq!(compute_payoff(49.0, 1.0), Money(0));
    }

    #[test]
    fn money_display_is_dollars_and_cents() {
        assert_eq!(Money(200).to_string(), "2.00");
        assert_eq!(Money(5).to_string(), "0.05");
        assert_eq!(Money(-370).to_string(), "-3.70");
    }

    #[test]
    fn counterfactuals_share_the_drawn_class() {
        let s = situation_s();
        let choices = [Principle::max_floor(), Principle::max_average()];
        let map = counterfactual_payoffs(&s, 0, &choices, 1.0).unwrap();
        assert_eq!(map[&PrincipleKind::MaxFloor], Money(100));
        assert_eq!(map[&PrincipleKind::MaxAverage], Money(50));
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn counterfactuals_on_single_distribution_are_equal() {
        let s = single("only", [2_000.0, 2_500.0, 3_000.0, 3_500.0, 4_000.0]);
        let choices = [Principle::max_floor(), Principle::max_average()];
        let map = counterfactual_payoffs(&s, 3, &choices, 1.0).unwrap();
        let values: Vec<Money> = map.values().copied().collect();
        assert!(values.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn counterfactuals_of_no_choices_is_empty() {
        let s = situation_s();
        assert!(counterfactual_payoffs(&s, 1, &[], 1.0).unwrap().is_empty());
    }

    #[test]
    fn scale_situation_doubles_incomes() {
        let s = situation_s();
        let scaled = scale_situation(&s, 2.0).unwrap();
        assert_eq!(
            scaled.distributions()[0].class_incomes(),
            &[20_000.0, 30_000.0, 40_000.0, 50_000.0, 60_000.0]
        );
        assert_eq!(scaled.name(), "S-x2");
        assert_eq!(scaled.probabilities(), s.probabilities());
    }

    #[test]
    fn scale_situation_keeps_zero_incomes_zero() {
        let s = single("zero", [0.0; 5]);
        let scaled = scale_situation(&s, 6.0).unwrap();
        assert_eq!(scaled.distributions()[0].class_incomes(), &[0.0; 5]);
    }

    #[test]
    fn scale_factor_outside_bounds_is_rejected() {
        let s = situation_s();
        assert!(matches!(
            scale_situation(&s, 1.5),
            Err(DomainError::ScaleOutOfRange { .. })
        ));
        assert!(matches!(
            scale_situation(&s, 6.01),
            Err(DomainError::ScaleOutOfRange { .. })
        ));
    }

    #[test]
    fn bank_balance_tracks_sum_of_deltas() {
        let mut b = BankBalance::new();
        b.credit("round-1", Money(123));
        b.credit("round-2", Money(77));
        b.credit("binding", Money(-50));
        assert_eq!(b.total(), Money(150));
        assert_eq!(b.history().iter().map(|d| d.delta).sum::<Money>(), b.total());
    }

    #[test]
    fn distribution_must_be_non_decreasing() {
        assert!(IncomeDistribution::new("bad", [2.0, 1.0, 3.0, 4.0, 5.0]).is_err());
        assert!(IncomeDistribution::new("ok", [1.0, 1.0, 2.0, 2.0, 2.0]).is_ok());
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        assert!(ClassProbabilities::new([0.3, 0.2, 0.2, 0.2, 0.2]).is_err());
        assert!(ClassProbabilities::new([0.2, 0.2, 0.2, 0.2, 0.1]).is_err());
        assert!(ClassProbabilities::new([0.2; 5]).is_ok());
        assert!(ClassProbabilities::new([0.2, 0.2, 0.2, 0.2, 0.19999999999]).is_ok());
    }

    #[test]
    fn situation_rejects_duplicate_labels_and_bad_hints() {
        let d1 = dist("same", [1.0; 5]);
        let d2 = dist("same", [2.0; 5]);
        assert!(Situation::new(
            "dup",
            vec![d1.clone(), d2],
            ClassProbabilities::default(),
            BTreeMap::new()
        )
        .is_err());
        let mut hints = BTreeMap::new();
        hints.insert(PrincipleKind::MaxFloor, "missing".to_string());
        assert!(
            Situation::new("hint", vec![d1], ClassProbabilities::default(), hints).is_err()
        );
    }

    #[test]
    fn embedded_dataset_hints_match_evaluation() {
        // Every shipped situation promises that each principle selects a
        // distinct distribution under the default constraint values.
        let set = SituationSet::embedded();
        assert_eq!(set.names(), vec!["A", "B", "C", "D", "G"]);
        for situation in set.situations() {
            let mut selected = Vec::new();
            for kind in PrincipleKind::ALL {
                let principle = match kind {
                    PrincipleKind::MaxAvgWithFloor => Principle::with_floor(10_000.0).unwrap(),
                    PrincipleKind::MaxAvgWithRange => Principle::with_range(20_000.0).unwrap(),
                    other => Principle::new(other, None).unwrap(),
                };
                let label = evaluate_principle(&principle, situation).unwrap();
                assert_eq!(
                    Some(&label.to_string()),
                    situation.principle_hints().get(&kind),
                    "situation {} kind {kind}",
                    situation.name()
                );
                selected.push(label.to_string());
            }
            selected.sort();
            selected.dedup();
            assert_eq!(selected.len(), 4, "distinct selections in {}", situation.name());
        }
    }

    /// Independent exhaustive evaluator used as the argmax oracle. Scans all
    /// class incomes directly rather than relying on the sortedness invariant.
    pub(crate) fn brute_force_select<'a>(
        principle: &Principle,
        situation: &'a Situation,
    ) -> Option<&'a str> {
        let mut best: Option<(&str, f64)> = None;
        for d in situation.distributions() {
            let lo = d
                .class_incomes()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let hi = d
                .class_incomes()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let feasible = match (principle.kind(), principle.constraint()) {
                (PrincipleKind::MaxAvgWithFloor, Some(c)) => lo >= c,
                (PrincipleKind::MaxAvgWithRange, Some(c)) => hi - lo <= c,
                _ => true,
            };
            if !feasible {
                continue;
            }
            let mut score = 0.0;
            if principle.kind() == PrincipleKind::MaxFloor {
                score = lo;
            } else {
                for i in 0..CLASS_COUNT {
                    score += situation.probabilities().probs()[i] * d.class_incomes()[i];
                }
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((d.label(), score));
            }
        }
        best.map(|(label, _)| label)
    }

    pub(crate) fn arbitrary_situation(seed: u64, max_dists: usize) -> Situation {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=max_dists);
        let mut dists = Vec::new();
        for i in 0..n {
            let mut incomes = [0.0; CLASS_COUNT];
            let mut v = rng.random_range(0..20_000) as f64;
            for slot in &mut incomes {
                *slot = v;
                v += rng.random_range(0..15_000) as f64;
            }
            dists.push(dist(&format!("d{i}"), incomes));
        }
        Situation::new(
            format!("rand-{seed}"),
            dists,
            ClassProbabilities::default(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    pub(crate) fn feasible_random_principle(seed: u64, situation: &Situation) -> Principle {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        match rng.random_range(0..4) {
            0 => Principle::max_floor(),
            1 => Principle::max_average(),
            2 => {
                let max_floor = situation
                    .distributions()
                    .iter()
                    .map(IncomeDistribution::floor)
                    .fold(f64::NEG_INFINITY, f64::max);
                Principle::with_floor(rng.random_range(0.0..=max_floor.max(1.0))).unwrap()
            }
            _ => {
                let min_range = situation
                    .distributions()
                    .iter()
                    .map(IncomeDistribution::range)
                    .fold(f64::INFINITY, f64::min);
                let hi = situation
                    .distributions()
                    .iter()
                    .map(IncomeDistribution::range)
                    .fold(f64::NEG_INFINITY, f64::max);
                Principle::with_range(rng.random_range(min_range..=hi.max(min_range + 1.0)))
                    .unwrap()
            }
        }
    }

    #[test]
    fn evaluate_matches_brute_force_oracle() {
        for seed in 0..2_000u64 {
            let s = arbitrary_situation(seed, 8);
            let p = feasible_random_principle(seed, &s);
            let expected = brute_force_select(&p, &s).expect("feasible by construction");
            assert_eq!(evaluate_principle(&p, &s).unwrap(), expected, "seed {seed}");
        }
    }

    #[test]
    fn feasibility_soundness() {
        for seed in 0..500u64 {
            let s = arbitrary_situation(seed, 6);
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 71);
            let constraint = rng.random_range(0.0..120_000.0);
            for p in [
                Principle::with_floor(constraint).unwrap(),
                Principle::with_range(constraint).unwrap(),
            ] {
                let check = validate_constraint(&p, &s).unwrap();
                let eval = evaluate_principle(&p, &s);
                assert_eq!(
                    check.is_ok(),
                    eval.is_ok(),
                    "seed {seed}, principle {p}: check {check:?} vs eval {eval:?}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn scaling_preserves_unconstrained_argmax(seed in 0u64..5_000, factor in 2.0f64..=6.0) {
            let s = arbitrary_situation(seed, 8);
            let scaled = scale_situation(&s, factor).unwrap();
            for p in [Principle::max_floor(), Principle::max_average()] {
                prop_assert_eq!(
                    evaluate_principle(&p, &s).unwrap(),
                    evaluate_principle(&p, &scaled).unwrap()
                );
            }
        }

        #[test]
        fn balance_total_equals_delta_sum(deltas in proptest::collection::vec(-10_000i64..10_000, 0..40)) {
            let mut b = BankBalance::new();
            for (i, d) in deltas.iter().enumerate() {
                b.credit(format!("phase-{i}"), Money(*d));
            }
            prop_assert_eq!(b.total().cents(), deltas.iter().sum::<i64>());
        }

        #[test]
        fn class_for_uniform_is_total(u in 0.0f64..1.0) {
            let probs = ClassProbabilities::default();
            prop_assert!(probs.class_for_uniform(u) < CLASS_COUNT);
        }
    }
}
