//! High-level planning through an external LLM: prompt construction, plan
//! parsing and validation, a pluggable client trait with a deterministic
//! mock, and the combination benchmark.
//!
//! The artifact never interprets images; payloads are opaque bytes forwarded
//! to the client.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API credential for live clients.
pub const API_KEY_ENV: &str = "SKILLSPACE_API_KEY";

/// The five stew ingredients, in catalog-key order (key = position + 1).
pub const INGREDIENTS: [&str; 5] = ["tomato", "mushroom", "potato", "salt", "oil"];

/// Prompt used to ask a multi-modal model what a rendered skill execution
/// does. Labeling itself is outside this toolkit (it needs a renderer and a
/// vision model); the template ships for external use.
pub const SNAPSHOT_LABELING_PROMPT: &str = "I will provide you with snapshot images of a robot \
interacting with a single object. Your task is to analyze each image and predict the robot's \
specific action based solely on visual cues. Return a concise description of the action that \
best fits the images. Provide only the action description with no additional text or \
explanations.";

/// Object-location sentence inserted by the hidden-prior template when the
/// task carries no environment note.
pub const DEFAULT_HIDDEN_NOTE: &str = "The tomato is located in the right cupboard, the mushroom \
in the left cupboard, and the potato in the drawer.";

#[derive(Debug, Error)]
pub enum PlanHighError {
    #[error("catalog has no actions")]
    EmptyCatalog,
    #[error("task has no ingredients")]
    EmptyIngredients,
    #[error("no bracketed integer list found in response")]
    NoListFound,
    #[error("key {0} is not in the action catalog")]
    KeyOutOfCatalog(u32),
    #[error("ingredient {0:?} has no ground-truth key")]
    MissingIngredientKey(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error after {retries} retries: {msg}")]
    Transport { msg: String, retries: u32 },
    #[error("client timed out after {0} s")]
    Timeout(u64),
}

// ---------------------------------------------------------------------------
// Action catalogs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogVariant {
    SkillsOnly,
    WithRelevant,
    WithIrrelevant,
    Both,
    HiddenEnv,
}

/// Numbered actions offered to the high-level planner.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCatalog {
    pub variant: CatalogVariant,
    actions: BTreeMap<u32, String>,
    retrieval_keys: BTreeSet<u32>,
    /// Retrieval key -> the open action that must precede it (hidden
    /// environments only).
    open_requirements: BTreeMap<u32, u32>,
}

/// The five retrieval skills, worded as in the basic planning prompt. The
/// trailing space in action 5 is part of the shipped prompt text.
const SKILLS_ONLY: [&str; 5] = [
    "retrieve the object in the right cupboard and add to the pan",
    "retrieve the object in the left cupboard and add to the pan",
    "retrieve the object in the drawer and add to the pan",
    "retrieve the object on the left of the stove and add to the pan",
    "retrieve the object on the right of the stove and add to the pan ",
];

const RELEVANT_EXTRAS: [&str; 18] = [
    "put the pan to top right stove",
    "put the pan to the top left stove",
    "put the pan on the bottom right stove",
    "put the pan to the bottom left stove",
    "close the right cupboard",
    "close the left cupboard",
    "close the drawer",
    "open the drawer",
    "open the right cupboard",
    "open the left cupboard",
    "open the oven",
    "start the blender",
    "close the microwave",
    "open the microwave",
    "start the microwave at high heat",
    "start the microwave at low heat",
    "stop the microwave",
    "plug in the microwave",
];

/// Distractors unrelated to the kitchen task. Key 13 is absent in the
/// shipped list and stays absent here.
const IRRELEVANT_EXTRAS: [(u32, &str); 24] = [
    (6, "charge the phone"),
    (7, "plug in the microwave"),
    (8, "plug in the phone charger"),
    (9, "open the door"),
    (10, "close the door"),
    (11, "synchronize the clock"),
    (12, "fill the glass with water"),
    (14, "wipe the floor"),
    (15, "mop the floor"),
    (16, "vacuum the living room"),
    (17, "vacuum the dining room"),
    (18, "vacuum the bedroom"),
    (19, "vacuum the cellar"),
    (20, "turn on the lights"),
    (21, "turn off the lights"),
    (22, "charge the laptop"),
    (23, "put the kids to sleep"),
    (24, "wash the clothes"),
    (25, "start the washing machine"),
    (26, "start the dryer"),
    (27, "dry the clothes"),
    (28, "hang the clothes"),
    (29, "make the beds"),
    (30, "clean the desk"),
];

impl ActionCatalog {
    fn base(variant: CatalogVariant, skills: [&str; 5]) -> ActionCatalog {
        let actions: BTreeMap<u32, String> =
            skills.iter().enumerate().map(|(i, s)| (i as u32 + 1, s.to_string())).collect();
        ActionCatalog {
            variant,
            actions,
            retrieval_keys: (1..=5).collect(),
            open_requirements: BTreeMap::new(),
        }
    }

    /// Keys 1..=5: just the discovered retrieval skills.
    pub fn skills_only() -> ActionCatalog {
        Self::base(CatalogVariant::SkillsOnly, SKILLS_ONLY)
    }

    /// Skills plus environment-related actions (opening cupboards, moving
    /// the pan, appliance controls).
    pub fn with_relevant() -> ActionCatalog {
        let mut cat = Self::base(
            CatalogVariant::WithRelevant,
            [
                "retrieve the object in the right cupboard and add it to the pan",
                "retrieve the object in the left cupboard and add it to the pan",
                "retrieve the object in the drawer and add it to the pan",
                "retrieve the object on the left of the stove and add to the pan",
                "retrieve the object on the right of the stove and add it to the pan",
            ],
        );
        cat.variant = CatalogVariant::WithRelevant;
        for (i, extra) in RELEVANT_EXTRAS.iter().enumerate() {
            cat.actions.insert(i as u32 + 6, extra.to_string());
        }
        cat
    }

    /// Skills plus actions unrelated to the environment.
    pub fn with_irrelevant() -> ActionCatalog {
        let mut cat = Self::base(
            CatalogVariant::WithIrrelevant,
            [
                "retrieve the object in the right cupboard and add it to the pan",
                "retrieve the object in the left cupboard and add to the pan",
                "retrieve the object in the drawer and add to the pan",
                "retrieve the object on the left of the stove and add to the pan",
                "retrieve the object on the right of the stove and add to the pan",
            ],
        );
        cat.variant = CatalogVariant::WithIrrelevant;
        for (key, desc) in IRRELEVANT_EXTRAS {
            cat.actions.insert(key, desc.to_string());
        }
        cat
    }

    /// Relevant and irrelevant distractors together; the irrelevant extras
    /// are renumbered after the relevant block.
    pub fn both() -> ActionCatalog {
        let mut cat = Self::with_relevant();
        cat.variant = CatalogVariant::Both;
        let mut next = cat.actions.keys().max().copied().unwrap_or(0) + 1;
        for (_, desc) in IRRELEVANT_EXTRAS {
            cat.actions.insert(next, desc.to_string());
            next += 1;
        }
        cat
    }

    /// Closed cupboards and drawer: retrievals must be preceded by their
    /// matching open action.
    pub fn hidden_env() -> ActionCatalog {
        let mut cat = Self::base(
            CatalogVariant::HiddenEnv,
            [
                "retrieve the object in the right cupboard and add to the pan",
                "retrieve the object in the left cupboard and add to the pan",
                "retrieve the object in the drawer and add to the pan",
                "retrieve the object on the left of the stove and add to the pan",
                "retrieve the object on the right of the stove and add to the pan",
            ],
        );
        cat.variant = CatalogVariant::HiddenEnv;
        for (key, desc) in [
            (6, "open the right cupboard"),
            (7, "open the left cupboard"),
            (8, "open the drawer"),
            (9, "close the right cupboard"),
            (10, "close the left cupboard"),
            (11, "close the drawer"),
        ] {
            cat.actions.insert(key, desc.to_string());
        }
        // Stove-side objects are visible; only enclosed sources need opening.
        cat.open_requirements = [(1, 6), (2, 7), (3, 8)].into_iter().collect();
        cat
    }

    pub fn for_variant(variant: CatalogVariant) -> ActionCatalog {
        match variant {
            CatalogVariant::SkillsOnly => Self::skills_only(),
            CatalogVariant::WithRelevant => Self::with_relevant(),
            CatalogVariant::WithIrrelevant => Self::with_irrelevant(),
            CatalogVariant::Both => Self::both(),
            CatalogVariant::HiddenEnv => Self::hidden_env(),
        }
    }

    pub fn actions(&self) -> &BTreeMap<u32, String> {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, key: u32) -> bool {
        self.actions.contains_key(&key)
    }

    pub fn is_retrieval(&self, key: u32) -> bool {
        self.retrieval_keys.contains(&key)
    }

    pub fn required_open(&self, retrieval_key: u32) -> Option<u32> {
        self.open_requirements.get(&retrieval_key).copied()
    }

    /// Inline numbered block as it appears in the planning prompts.
    fn render_actions(&self) -> String {
        let mut out = String::from("{ ");
        for (key, desc) in &self.actions {
            out.push_str(&format!("{key}:\"{desc}\", "));
        }
        out.push('}');
        out
    }
}

// ---------------------------------------------------------------------------
// Tasks and prompts
// ---------------------------------------------------------------------------

/// Ground truth: ingredient name -> retrieval key, matching the default
/// kitchen layout.
pub fn default_ingredient_map() -> BTreeMap<String, u32> {
    INGREDIENTS.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32 + 1)).collect()
}

/// A stew-making goal.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub ingredients: Vec<String>,
    /// Evaluation-only mapping used by [`validate_plan`], never rendered
    /// into prompts.
    pub ingredient_to_key: BTreeMap<String, u32>,
    /// Optional hidden-object location sentence for the hidden-prior
    /// template.
    pub environment_note: Option<String>,
}

impl TaskSpec {
    pub fn new(ingredients: &[&str]) -> TaskSpec {
        TaskSpec {
            ingredients: ingredients.iter().map(|s| s.to_string()).collect(),
            ingredient_to_key: default_ingredient_map(),
            environment_note: None,
        }
    }

    /// Retrieval keys this task requires.
    pub fn required_keys(&self) -> Result<BTreeSet<u32>, PlanHighError> {
        self.ingredients
            .iter()
            .map(|i| {
                self.ingredient_to_key
                    .get(i)
                    .copied()
                    .ok_or_else(|| PlanHighError::MissingIngredientKey(i.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    Basic,
    HiddenPrior,
    Exploration,
}

/// Render the prompt for a task. Pure: byte-identical output for identical
/// inputs.
pub fn build_prompt(
    task: &TaskSpec,
    catalog: &ActionCatalog,
    template: PromptTemplate,
) -> Result<String, PlanHighError> {
    if catalog.is_empty() {
        return Err(PlanHighError::EmptyCatalog);
    }
    if task.ingredients.is_empty() {
        return Err(PlanHighError::EmptyIngredients);
    }
    let ingredients = task.ingredients.join(", ");
    let actions = catalog.render_actions();
    let prompt = match template {
        PromptTemplate::Basic => format!(
            "Given the robotic environment in the image, how can the robot make a stew using \
             the following ingredients: {ingredients}? The available actions are: \n{actions}\n\
             Select the necessary actions to achieve the goal and return only their \
             corresponding keys in a list, formatted as JSON. No explanation, descriptions, or \
             additional output is needed."
        ),
        PromptTemplate::HiddenPrior => {
            let note = task.environment_note.as_deref().unwrap_or(DEFAULT_HIDDEN_NOTE);
            format!(
                "Given the robotic environment in the image, how can the robot make a stew \
                 using the following ingredients: {ingredients}? {note} The available actions \
                 are: {actions}. Return only the keys of the actions necessary to complete the \
                 task in the correct sequence, formatted as a list in JSON. No additional text \
                 or explanations are required."
            )
        }
        PromptTemplate::Exploration => format!(
            "Given the robotic environment in the image, how can the robot make a stew made of \
             {ingredients}? Only the following actions can be used: {actions}. You are free to \
             explore the environment using the given actions and ask for an updated version of \
             the environment."
        ),
    };
    Ok(prompt)
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// An ordered list of action keys parsed from a model response.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub keys: Vec<u32>,
    pub raw_response: String,
}

/// Canonical rendering of a key list, as the prompts request.
pub fn render_plan(keys: &[u32]) -> String {
    let body = keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ");
    format!("[{body}]")
}

/// Extract the first well-formed bracketed integer list from a response,
/// tolerating code fences and surrounding prose, and check every key against
/// the catalog.
pub fn parse_plan(response: &str, catalog: &ActionCatalog) -> Result<Plan, PlanHighError> {
    let bytes = response.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'[' {
            continue;
        }
        let Some(rel_end) = response[i + 1..].find(']') else { break };
        let inner = &response[i + 1..i + 1 + rel_end];
        if let Some(keys) = parse_int_list(inner) {
            for &key in &keys {
                if !catalog.contains(key) {
                    return Err(PlanHighError::KeyOutOfCatalog(key));
                }
            }
            return Ok(Plan { keys, raw_response: response.to_string() });
        }
    }
    Err(PlanHighError::NoListFound)
}

fn parse_int_list(inner: &str) -> Option<Vec<u32>> {
    let trimmed = inner.trim();
    if trimmed.is_empty() {
        return Some(Vec::new());
    }
    trimmed.split(',').map(|tok| tok.trim().parse::<u32>().ok()).collect()
}

/// Validation outcome for one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    /// Required retrieval keys the plan never issues.
    pub missing: Vec<u32>,
    /// Retrieval keys issued beyond the required set (duplicates included).
    pub extra: Vec<u32>,
    /// Retrievals not preceded by their required open action.
    pub order_violations: Vec<u32>,
}

/// Strict scoring: success iff the multiset of retrieval keys in the plan
/// equals the task's required set exactly and, in hidden environments, every
/// enclosed retrieval is preceded by its open action. Non-retrieval keys are
/// ignored otherwise.
pub fn validate_plan(
    plan: &Plan,
    task: &TaskSpec,
    catalog: &ActionCatalog,
) -> Result<Verdict, PlanHighError> {
    let required = task.required_keys()?;

    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let mut extra = Vec::new();
    let mut order_violations = Vec::new();
    let mut opened: BTreeSet<u32> = BTreeSet::new();
    for &key in &plan.keys {
        if !catalog.is_retrieval(key) {
            opened.insert(key);
            continue;
        }
        let count = seen.entry(key).or_insert(0);
        *count += 1;
        if !required.contains(&key) || *count > 1 {
            extra.push(key);
        }
        if let Some(open_key) = catalog.required_open(key) {
            if !opened.contains(&open_key) {
                order_violations.push(key);
            }
        }
    }
    let missing: Vec<u32> = required.iter().copied().filter(|k| !seen.contains_key(k)).collect();

    let success = missing.is_empty() && extra.is_empty() && order_violations.is_empty();
    Ok(Verdict { success, missing, extra, order_violations })
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

/// Boundary to the external language model. Implementations must not touch
/// the toolkit's own state; images are opaque payloads.
pub trait LlmClient {
    fn send(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String, ClientError>;
}

/// Connection settings for a live client; the credential itself comes from
/// [`API_KEY_ENV`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_s: u64,
    pub retries: u32,
}

/// Deterministic offline client. Policies either answer correctly (parsing
/// the ingredient list out of the prompt against the ground-truth map) or
/// fail in a scripted, countable way.
pub struct MockClient {
    policy: MockPolicy,
    mapping: BTreeMap<String, u32>,
    calls: AtomicU64,
}

pub enum MockPolicy {
    /// Always return the correct keys.
    Perfect,
    /// Return unparseable prose on every n-th call (1-based), otherwise
    /// behave perfectly; gives an exact designed success rate of (n-1)/n.
    FailEvery(u64),
    /// Answer correctly only when the catalog rendered into the prompt has
    /// at most this many actions; otherwise return prose. Models the
    /// distraction effect of large skill spaces.
    ConfusedByLargeCatalog(usize),
    /// Canned responses keyed by "template|ingredient, ingredient, ...".
    Scripted(BTreeMap<String, String>),
}

impl MockClient {
    pub fn new(policy: MockPolicy) -> MockClient {
        MockClient { policy, mapping: default_ingredient_map(), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn correct_answer(&self, prompt: &str) -> String {
        let mut keys: Vec<u32> = extract_ingredients(prompt)
            .iter()
            .filter_map(|i| self.mapping.get(i).copied())
            .collect();
        keys.sort_unstable();
        render_plan(&keys)
    }
}

/// Pull the comma-separated ingredient list back out of a rendered prompt.
fn extract_ingredients(prompt: &str) -> Vec<String> {
    let start = prompt
        .find("ingredients: ")
        .map(|i| i + "ingredients: ".len())
        .or_else(|| prompt.find("stew made of ").map(|i| i + "stew made of ".len()));
    let Some(start) = start else { return Vec::new() };
    let Some(end) = prompt[start..].find('?') else { return Vec::new() };
    prompt[start..start + end].split(',').map(|s| s.trim().to_string()).collect()
}

/// Which template produced a prompt; used by scripted mocks.
pub fn detect_template(prompt: &str) -> PromptTemplate {
    if prompt.contains("free to explore") {
        PromptTemplate::Exploration
    } else if prompt.contains("in the correct sequence") {
        PromptTemplate::HiddenPrior
    } else {
        PromptTemplate::Basic
    }
}

fn template_tag(t: PromptTemplate) -> &'static str {
    match t {
        PromptTemplate::Basic => "basic",
        PromptTemplate::HiddenPrior => "hidden_prior",
        PromptTemplate::Exploration => "exploration",
    }
}

const MOCK_REFUSAL: &str = "I'm sorry, I cannot determine the right actions for this task.";

impl LlmClient for MockClient {
    fn send(&self, prompt: &str, _images: &[Vec<u8>]) -> Result<String, ClientError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let response = match &self.policy {
            MockPolicy::Perfect => self.correct_answer(prompt),
            MockPolicy::FailEvery(n) => {
                if *n > 0 && call % n == 0 {
                    MOCK_REFUSAL.to_string()
                } else {
                    self.correct_answer(prompt)
                }
            }
            MockPolicy::ConfusedByLargeCatalog(max_actions) => {
                let action_count = prompt.matches(":\"").count();
                if action_count > *max_actions {
                    MOCK_REFUSAL.to_string()
                } else {
                    self.correct_answer(prompt)
                }
            }
            MockPolicy::Scripted(map) => {
                let tag = template_tag(detect_template(prompt));
                let ingredients = extract_ingredients(prompt).join(", ");
                map.get(&format!("{tag}|{ingredients}"))
                    .cloned()
                    .unwrap_or_else(|| MOCK_REFUSAL.to_string())
            }
        };
        Ok(response)
    }
}

// ---------------------------------------------------------------------------
// End-to-end task planning
// ---------------------------------------------------------------------------

/// Everything one planning attempt produced; parse failures are recorded
/// here rather than raised.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub prompt: String,
    pub raw_response: String,
    pub plan: Option<Plan>,
    pub verdict: Option<Verdict>,
    pub parse_error: Option<String>,
}

impl PlanOutcome {
    pub fn succeeded(&self) -> bool {
        self.verdict.as_ref().map(|v| v.success).unwrap_or(false)
    }
}

/// Build the prompt, send it (with optional image payloads), parse the
/// response, and validate the plan. Transport errors surface as `Err`;
/// unparseable responses come back as failed trials.
pub fn plan_task(
    client: &dyn LlmClient,
    task: &TaskSpec,
    catalog: &ActionCatalog,
    template: PromptTemplate,
    images: &[Vec<u8>],
) -> Result<PlanOutcome, PlanHighError> {
    let prompt = build_prompt(task, catalog, template)?;
    log::debug!("prompt: {prompt}");
    let raw_response = client.send(&prompt, images)?;
    log::debug!("response: {raw_response}");
    match parse_plan(&raw_response, catalog) {
        Ok(plan) => {
            let verdict = validate_plan(&plan, task, catalog)?;
            Ok(PlanOutcome { prompt, raw_response, plan: Some(plan), verdict: Some(verdict), parse_error: None })
        }
        Err(e) => Ok(PlanOutcome {
            prompt,
            raw_response,
            plan: None,
            verdict: None,
            parse_error: Some(e.to_string()),
        }),
    }
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// Aggregate outcomes for one catalog variant.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VariantStats {
    pub trials: usize,
    pub successes: usize,
    pub parse_failures: usize,
    /// Sum over trials of (required ingredients retrieved / required).
    pub recall_sum: f64,
}

impl VariantStats {
    pub fn success_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }

    pub fn mean_recall(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.recall_sum / self.trials as f64
        }
    }
}

/// Success rates per catalog variant over every ingredient combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub variants: Vec<CatalogVariant>,
    pub per_variant: BTreeMap<String, VariantStats>,
    /// Set when a client failure stopped the run early; completed trials are
    /// kept.
    pub aborted: Option<String>,
}

fn variant_tag(v: CatalogVariant) -> &'static str {
    match v {
        CatalogVariant::SkillsOnly => "only_skills",
        CatalogVariant::WithRelevant => "with_relevant_actions",
        CatalogVariant::WithIrrelevant => "with_irrelevant_actions",
        CatalogVariant::Both => "both",
        CatalogVariant::HiddenEnv => "hidden_env",
    }
}

impl BenchmarkReport {
    pub fn stats(&self, v: CatalogVariant) -> &VariantStats {
        &self.per_variant[variant_tag(v)]
    }

    /// Text table shaped like the planning-performance comparison: one
    /// column per variant.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24}", ""));
        for v in &self.variants {
            out.push_str(&format!("{:>26}", variant_tag(*v)));
        }
        out.push('\n');
        out.push_str(&format!("{:<24}", "planning performance"));
        for v in &self.variants {
            out.push_str(&format!("{:>25.2}%", 100.0 * self.stats(*v).success_rate()));
        }
        out.push('\n');
        out.push_str(&format!("{:<24}", "ingredient recall"));
        for v in &self.variants {
            out.push_str(&format!("{:>25.2}%", 100.0 * self.stats(*v).mean_recall()));
        }
        out.push('\n');
        if let Some(reason) = &self.aborted {
            out.push_str(&format!("aborted early: {reason}\n"));
        }
        out
    }
}

/// Every non-empty subset of [`INGREDIENTS`], in bitmask order: 31 tasks.
pub fn all_ingredient_combinations() -> Vec<Vec<&'static str>> {
    let n = INGREDIENTS.len();
    (1u32..(1 << n))
        .map(|mask| {
            (0..n).filter(|i| mask & (1 << i) != 0).map(|i| INGREDIENTS[i]).collect()
        })
        .collect()
}

/// Run `trials` plans per ingredient combination per catalog variant. Hidden
/// environments use the hidden-prior template, everything else the basic
/// one. On a transport error the partial report is returned with `aborted`
/// set.
pub fn run_benchmark(
    client: &dyn LlmClient,
    variants: &[CatalogVariant],
    trials: usize,
) -> BenchmarkReport {
    let combos = all_ingredient_combinations();
    let mut per_variant = BTreeMap::new();
    let mut aborted = None;

    'outer: for &variant in variants {
        let catalog = ActionCatalog::for_variant(variant);
        let template = match variant {
            CatalogVariant::HiddenEnv => PromptTemplate::HiddenPrior,
            _ => PromptTemplate::Basic,
        };
        let stats: &mut VariantStats =
            per_variant.entry(variant_tag(variant).to_string()).or_default();
        for combo in &combos {
            let task = TaskSpec::new(combo);
            for _ in 0..trials {
                match plan_task(client, &task, &catalog, template, &[]) {
                    Ok(outcome) => {
                        stats.trials += 1;
                        if outcome.succeeded() {
                            stats.successes += 1;
                        }
                        if outcome.parse_error.is_some() {
                            stats.parse_failures += 1;
                        }
                        stats.recall_sum += recall(&outcome, &task, &catalog);
                    }
                    Err(e) => {
                        aborted = Some(e.to_string());
                        break 'outer;
                    }
                }
            }
        }
    }

    BenchmarkReport { variants: variants.to_vec(), per_variant, aborted }
}

fn recall(outcome: &PlanOutcome, task: &TaskSpec, catalog: &ActionCatalog) -> f64 {
    let Some(plan) = &outcome.plan else { return 0.0 };
    let Ok(required) = task.required_keys() else { return 0.0 };
    if required.is_empty() {
        return 0.0;
    }
    let present = required
        .iter()
        .filter(|k| plan.keys.iter().any(|p| p == *k && catalog.is_retrieval(*p)))
        .count();
    present as f64 / required.len() as f64
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skills_only_keys_are_contiguous_from_one() {
        let cat = ActionCatalog::skills_only();
        let keys: Vec<u32> = cat.actions().keys().copied().collect();
        assert_eq!(keys, vec![1, 2, 3, 4, 5]);
        assert!(keys.iter().all(|&k| cat.is_retrieval(k)));
    }

    #[test]
    fn irrelevant_catalog_skips_key_13() {
        let cat = ActionCatalog::with_irrelevant();
        assert!(!cat.contains(13));
        assert!(cat.contains(12));
        assert!(cat.contains(14));
        assert_eq!(cat.len(), 29);
    }

    #[test]
    fn combined_catalog_has_no_key_collisions() {
        let cat = ActionCatalog::both();
        assert_eq!(cat.len(), 23 + 24);
        let relevant = ActionCatalog::with_relevant();
        for (k, v) in relevant.actions() {
            assert_eq!(&cat.actions()[k], v);
        }
    }

    #[test]
    fn basic_prompt_carries_the_shipped_wording() {
        let task = TaskSpec::new(&["tomato"]);
        let prompt =
            build_prompt(&task, &ActionCatalog::skills_only(), PromptTemplate::Basic).unwrap();
        assert!(prompt.contains("return only their corresponding keys in a list"));
        assert!(prompt.contains("ingredients: tomato?"));
        assert!(prompt.contains("5:\"retrieve the object on the right of the stove and add to the pan \", }"));
        assert_eq!(prompt.matches("tomato").count(), 1);
    }

    #[test]
    fn hidden_prior_prompt_inserts_the_location_note() {
        let task = TaskSpec::new(&["potato", "salt"]);
        let prompt =
            build_prompt(&task, &ActionCatalog::hidden_env(), PromptTemplate::HiddenPrior)
                .unwrap();
        assert!(prompt.contains(DEFAULT_HIDDEN_NOTE));
        assert!(prompt.contains("in the correct sequence"));
        let custom = TaskSpec {
            environment_note: Some("The salt is under the sink.".into()),
            ..TaskSpec::new(&["salt"])
        };
        let prompt2 =
            build_prompt(&custom, &ActionCatalog::hidden_env(), PromptTemplate::HiddenPrior)
                .unwrap();
        assert!(prompt2.contains("The salt is under the sink."));
        assert!(!prompt2.contains(DEFAULT_HIDDEN_NOTE));
    }

    #[test]
    fn build_prompt_is_pure() {
        let task = TaskSpec::new(&["oil", "mushroom"]);
        let cat = ActionCatalog::both();
        let a = build_prompt(&task, &cat, PromptTemplate::Exploration).unwrap();
        let b = build_prompt(&task, &cat, PromptTemplate::Exploration).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_catalog_and_empty_ingredients_are_rejected() {
        let empty = ActionCatalog {
            variant: CatalogVariant::SkillsOnly,
            actions: BTreeMap::new(),
            retrieval_keys: BTreeSet::new(),
            open_requirements: BTreeMap::new(),
        };
        let task = TaskSpec::new(&["tomato"]);
        assert!(matches!(
            build_prompt(&task, &empty, PromptTemplate::Basic),
            Err(PlanHighError::EmptyCatalog)
        ));
        let no_ingredients = TaskSpec::new(&[]);
        assert!(matches!(
            build_prompt(&no_ingredients, &ActionCatalog::skills_only(), PromptTemplate::Basic),
            Err(PlanHighError::EmptyIngredients)
        ));
    }

    #[test]
    fn parse_extracts_plain_and_fenced_lists() {
        let cat = ActionCatalog::skills_only();
        assert_eq!(parse_plan("[1, 3, 5]", &cat).unwrap().keys, vec![1, 3, 5]);
        let fenced = "Here is the plan:\n```json\n[2, 4]\n```\nGood luck!";
        assert_eq!(parse_plan(fenced, &cat).unwrap().keys, vec![2, 4]);
        let prose = "I suggest [not this] but rather [3] instead";
        assert_eq!(parse_plan(prose, &cat).unwrap().keys, vec![3]);
        assert_eq!(parse_plan("answer: []", &cat).unwrap().keys, Vec::<u32>::new());
    }

    #[test]
    fn parse_rejects_unknown_keys_and_missing_lists() {
        let cat = ActionCatalog::skills_only();
        assert!(matches!(
            parse_plan("[1, 99]", &cat),
            Err(PlanHighError::KeyOutOfCatalog(99))
        ));
        assert!(matches!(
            parse_plan("no keys here", &cat),
            Err(PlanHighError::NoListFound)
        ));
    }

    #[test]
    fn parse_inverts_render() {
        let cat = ActionCatalog::with_relevant();
        for keys in [vec![], vec![1], vec![5, 2, 14], vec![1, 1, 2, 23]] {
            let round = parse_plan(&render_plan(&keys), &cat).unwrap();
            assert_eq!(round.keys, keys);
        }
    }

    #[test]
    fn validation_is_order_free_in_open_environments() {
        let cat = ActionCatalog::skills_only();
        let task = TaskSpec::new(&["tomato", "potato"]); // keys 1, 3
        let ok = Plan { keys: vec![3, 1], raw_response: String::new() };
        let verdict = validate_plan(&ok, &task, &cat).unwrap();
        assert!(verdict.success);

        let extra = Plan { keys: vec![1, 3, 4], raw_response: String::new() };
        let verdict = validate_plan(&extra, &task, &cat).unwrap();
        assert!(!verdict.success);
        assert_eq!(verdict.extra, vec![4]);
        assert!(verdict.missing.is_empty());

        let dup = Plan { keys: vec![1, 3, 3], raw_response: String::new() };
        let verdict = validate_plan(&dup, &task, &cat).unwrap();
        assert_eq!(verdict.extra, vec![3]);

        let short = Plan { keys: vec![1], raw_response: String::new() };
        let verdict = validate_plan(&short, &task, &cat).unwrap();
        assert_eq!(verdict.missing, vec![3]);
    }

    #[test]
    fn hidden_environment_orderings_match_hand_table() {
        // Task: tomato (retrieval 1, open 6). Enumerate every ordering of
        // {open, retrieve} and the retrieve-only and open-only plans; the
        // hand table says only open-then-retrieve succeeds.
        let cat = ActionCatalog::hidden_env();
        let task = TaskSpec::new(&["tomato"]);
        let cases: Vec<(Vec<u32>, bool, bool)> = vec![
            // (plan, expect success, expect order violation)
            (vec![6, 1], true, false),
            (vec![1, 6], false, true),
            (vec![1], false, true),
            (vec![6], false, false), // missing retrieval, not an order issue
        ];
        for (keys, want_success, want_violation) in cases {
            let plan = Plan { keys: keys.clone(), raw_response: String::new() };
            let v = validate_plan(&plan, &task, &cat).unwrap();
            assert_eq!(v.success, want_success, "plan {keys:?}");
            assert_eq!(!v.order_violations.is_empty(), want_violation, "plan {keys:?}");
        }
        // Stove-side ingredients need no open action.
        let salt = TaskSpec::new(&["salt"]);
        let plan = Plan { keys: vec![4], raw_response: String::new() };
        assert!(validate_plan(&plan, &salt, &cat).unwrap().success);
    }

    #[test]
    fn mock_round_trip_succeeds() {
        let client = MockClient::new(MockPolicy::Perfect);
        let task = TaskSpec::new(&["tomato", "oil"]);
        let outcome = plan_task(
            &client,
            &task,
            &ActionCatalog::skills_only(),
            PromptTemplate::Basic,
            &[],
        )
        .unwrap();
        assert!(outcome.succeeded());
        assert_eq!(outcome.plan.unwrap().keys, vec![1, 5]);
    }

    #[test]
    fn prose_response_is_a_failed_trial_not_an_error() {
        let client = MockClient::new(MockPolicy::FailEvery(1)); // always fails
        let task = TaskSpec::new(&["salt"]);
        let outcome = plan_task(
            &client,
            &task,
            &ActionCatalog::skills_only(),
            PromptTemplate::Basic,
            &[],
        )
        .unwrap();
        assert!(!outcome.succeeded());
        assert!(outcome.plan.is_none());
        assert!(outcome.parse_error.is_some());
    }

    #[test]
    fn perfect_mock_scores_100_percent_everywhere() {
        let client = MockClient::new(MockPolicy::Perfect);
        let variants = [
            CatalogVariant::SkillsOnly,
            CatalogVariant::WithRelevant,
            CatalogVariant::WithIrrelevant,
            CatalogVariant::Both,
        ];
        let report = run_benchmark(&client, &variants, 1);
        for v in variants {
            assert_eq!(report.stats(v).trials, 31);
            assert_eq!(report.stats(v).success_rate(), 1.0, "{v:?}");
        }
        assert!(report.aborted.is_none());
    }

    #[test]
    fn catalog_size_sensitivity_shows_up_in_the_table() {
        let client = MockClient::new(MockPolicy::ConfusedByLargeCatalog(5));
        let variants = [CatalogVariant::SkillsOnly, CatalogVariant::WithRelevant];
        let report = run_benchmark(&client, &variants, 2);
        assert_eq!(report.stats(CatalogVariant::SkillsOnly).success_rate(), 1.0);
        assert_eq!(report.stats(CatalogVariant::WithRelevant).success_rate(), 0.0);
        let table = report.render_table();
        assert!(table.contains("planning performance"));
    }

    #[test]
    fn error_injection_rate_is_exact() {
        let n = 5u64;
        let client = MockClient::new(MockPolicy::FailEvery(n));
        let report = run_benchmark(&client, &[CatalogVariant::SkillsOnly], 10);
        let stats = report.stats(CatalogVariant::SkillsOnly);
        assert_eq!(stats.trials, 310);
        let expected_failures = 310 / n as usize;
        assert_eq!(stats.successes, 310 - expected_failures);
        assert_eq!(stats.parse_failures, expected_failures);
    }

    #[test]
    fn combinations_cover_the_power_set() {
        let combos = all_ingredient_combinations();
        assert_eq!(combos.len(), 31);
        assert!(combos.iter().any(|c| c.len() == 5));
        assert!(combos.iter().filter(|c| c.len() == 1).count() == 5);
    }

    #[test]
    fn template_detection_distinguishes_all_three() {
        let task = TaskSpec::new(&["potato"]);
        let cat = ActionCatalog::skills_only();
        for (template, want) in [
            (PromptTemplate::Basic, PromptTemplate::Basic),
            (PromptTemplate::HiddenPrior, PromptTemplate::HiddenPrior),
            (PromptTemplate::Exploration, PromptTemplate::Exploration),
        ] {
            let prompt = build_prompt(&task, &cat, template).unwrap();
            assert_eq!(detect_template(&prompt), want);
        }
    }

    #[test]
    fn scripted_mock_matches_on_template_and_ingredients() {
        let mut script = BTreeMap::new();
        script.insert("basic|tomato, salt".to_string(), "[1, 4]".to_string());
        let client = MockClient::new(MockPolicy::Scripted(script));
        let task = TaskSpec::new(&["tomato", "salt"]);
        let cat = ActionCatalog::skills_only();
        let outcome =
            plan_task(&client, &task, &cat, PromptTemplate::Basic, &[]).unwrap();
        assert!(outcome.succeeded());
        // A combination not in the script fails.
        let other = TaskSpec::new(&["oil"]);
        let outcome = plan_task(&client, &other, &cat, PromptTemplate::Basic, &[]).unwrap();
        assert!(!outcome.succeeded());
    }
}
