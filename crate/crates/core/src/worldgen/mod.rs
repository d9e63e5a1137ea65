//! Dependency-ordered world construction.
//!
//! A world is built in seven stages, each of which may only reference
//! entities materialized by an earlier one. Conflict injection and state
//! augmentation run on finished worlds.

mod augment;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment_states, base_bundles, materialize, sample_bases, Bundle, Guardrail};

use crate::dsl::ast::{Expr, Stmt};
use crate::engine::{sla_timer_table, BusinessRule, Operation, Phase, RuleDef, SlaDefinition};
use crate::schema::{check_record, FieldDef, FieldKind, SchemaRegistry, TableSchema};
use crate::store::{format_id, RecordId, Store};
use crate::value::{FieldMap, Value};
use crate::world::{AclPolicy, ConflictPair, PriorityMatrix, Role, World};

macro_rules! labelled_enum {
    ($name:ident { $($variant:ident => $label:expr),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| {
                        let known: Vec<_> = $name::ALL.iter().map(|v| v.as_str()).collect();
                        format!("unknown {} `{s}` (expected one of {})", stringify!($name).to_lowercase(), known.join(", "))
                    })
            }
        }
    };
}

labelled_enum!(Industry {
    Technology => "technology",
    Healthcare => "healthcare",
    Finance => "finance",
    Retail => "retail",
    Manufacturing => "manufacturing",
    PublicSector => "public_sector",
});

labelled_enum!(Size {
    Small => "small",
    Midmarket => "midmarket",
    Enterprise => "enterprise",
});

labelled_enum!(Automation {
    Light => "light",
    Heavy => "heavy",
});

/// The knobs that fully determine a generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldProfile {
    pub industry: Industry,
    pub size: Size,
    pub automation_level: Automation,
    pub conflict_density: f64,
    pub seed: u64,
}

impl WorldProfile {
    pub fn new(industry: Industry, size: Size, automation_level: Automation, conflict_density: f64, seed: u64) -> Self {
        WorldProfile { industry, size, automation_level, conflict_density, seed }
    }

    pub fn validate(&self) -> Result<(), WorldgenError> {
        check_density(self.conflict_density)
    }

    pub(crate) fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let industry = Industry::ALL.iter().position(|i| *i == self.industry).unwrap_or(0) as u64;
        rng.set_stream((industry << 8) | stream);
        rng
    }

    /// Pool sizes: groups, users, config items, work items.
    fn pools(&self) -> (usize, usize, usize, usize) {
        match self.size {
            Size::Small => (3, 6, 5, 6),
            Size::Midmarket => (5, 12, 10, 12),
            Size::Enterprise => (8, 24, 20, 24),
        }
    }

    fn rule_count(&self) -> usize {
        let base = match self.automation_level {
            Automation::Light => 4,
            Automation::Heavy => 8,
        };
        base + match self.size {
            Size::Small => 0,
            Size::Midmarket => 2,
            Size::Enterprise => 4,
        }
    }
}

fn check_density(d: f64) -> Result<(), WorldgenError> {
    if (0.0..=1.0).contains(&d) {
        Ok(())
    } else {
        Err(WorldgenError::InvalidProfile(format!("conflict density {d} is outside [0, 1]")))
    }
}

labelled_enum!(Stage {
    Organization => "organization",
    ConfigItems => "config_items",
    Lifecycles => "lifecycles",
    Rules => "rules",
    Acl => "acl",
    Slas => "slas",
    Constraints => "constraints",
});

impl Stage {
    /// Stages whose outputs this stage reads.
    pub fn prerequisites(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Organization => &[],
            ConfigItems => &[Organization],
            Lifecycles => &[Organization, ConfigItems],
            Rules => &[Lifecycles],
            Acl => &[Rules],
            Slas => &[Lifecycles, Acl],
            Constraints => &[Organization, ConfigItems, Lifecycles, Rules, Acl, Slas],
        }
    }
}

#[derive(Debug, Error)]
pub enum WorldgenError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("generation invariant violated in stage {stage}: {detail}")]
    GenerationInvariantViolated { stage: Stage, detail: String },
    #[error("no table is eligible for conflict injection")]
    NoEligibleTable,
    #[error("guardrail {guardrail} violated by bundle {bundle}: {detail}")]
    GuardrailViolation { guardrail: Guardrail, bundle: usize, detail: String },
}

struct Vocab {
    tables: [&'static str; 8],
    groups: [&'static str; 8],
    categories: [&'static str; 4],
    states: [&'static str; 5],
    ci_prefix: &'static str,
    domain: &'static str,
}

fn vocab(industry: Industry) -> &'static Vocab {
    const TECHNOLOGY: Vocab = Vocab {
        tables: ["u_team", "u_engineer", "u_service", "u_incident", "u_incident_task", "u_escalation", "u_alert", "u_change_approval"],
        groups: ["Service Desk", "Network Ops", "Database", "Platform", "Security", "Field Support", "Release", "Cloud"],
        categories: ["network", "database", "hardware", "software"],
        states: ["New", "In Progress", "On Hold", "Resolved", "Closed"],
        ci_prefix: "svc",
        domain: "techcorp",
    };
    const HEALTHCARE: Vocab = Vocab {
        tables: ["u_care_team", "u_clinician", "u_medical_device", "u_patient_case", "u_care_task", "u_clinical_escalation", "u_page", "u_consent"],
        groups: ["Emergency", "Radiology", "Cardiology", "Pharmacy", "Oncology", "Pediatrics", "Surgery", "Intake"],
        categories: ["triage", "lab", "pharmacy", "imaging"],
        states: ["Admitted", "Treating", "Awaiting Results", "Discharged", "Archived"],
        ci_prefix: "dev",
        domain: "clinic",
    };
    const FINANCE: Vocab = Vocab {
        tables: ["u_desk", "u_analyst", "u_ledger_account", "u_payment_request", "u_recon_task", "u_exception", "u_advice", "u_payment_approval"],
        groups: ["Payables", "Receivables", "Treasury", "Audit", "Compliance", "Payroll", "Tax", "Reporting"],
        categories: ["invoice", "wire", "expense", "refund"],
        states: ["Submitted", "Reviewing", "Pending Info", "Settled", "Closed"],
        ci_prefix: "gl",
        domain: "ledgerbank",
    };
    const RETAIL: Vocab = Vocab {
        tables: ["u_store_team", "u_associate", "u_sku", "u_order_case", "u_fulfillment_task", "u_order_escalation", "u_customer_message", "u_refund_approval"],
        groups: ["Front Store", "Warehouse", "Online", "Returns", "Loss Prevention", "Merchandising", "Delivery", "Support"],
        categories: ["delivery", "returns", "inventory", "billing"],
        states: ["Placed", "Picking", "Backordered", "Delivered", "Closed"],
        ci_prefix: "sku",
        domain: "shopmart",
    };
    const MANUFACTURING: Vocab = Vocab {
        tables: ["u_crew", "u_operator", "u_machine", "u_work_order", "u_maintenance_task", "u_line_escalation", "u_shift_notice", "u_quality_approval"],
        groups: ["Assembly", "Machining", "Paint", "Quality", "Logistics", "Maintenance", "Tooling", "Packaging"],
        categories: ["mechanical", "electrical", "quality", "safety"],
        states: ["Planned", "Running", "Blocked", "Completed", "Closed"],
        ci_prefix: "mc",
        domain: "plantworks",
    };
    const PUBLIC_SECTOR: Vocab = Vocab {
        tables: ["u_department", "u_caseworker", "u_facility", "u_citizen_request", "u_case_task", "u_supervisor_escalation", "u_citizen_notice", "u_permit_approval"],
        groups: ["Permits", "Benefits", "Records", "Housing", "Transit", "Parks", "Licensing", "Outreach"],
        categories: ["permits", "benefits", "records", "housing"],
        states: ["Received", "Processing", "Awaiting Citizen", "Decided", "Closed"],
        ci_prefix: "fac",
        domain: "cityhall",
    };
    match industry {
        Industry::Technology => &TECHNOLOGY,
        Industry::Healthcare => &HEALTHCARE,
        Industry::Finance => &FINANCE,
        Industry::Retail => &RETAIL,
        Industry::Manufacturing => &MANUFACTURING,
        Industry::PublicSector => &PUBLIC_SECTOR,
    }
}

const FIRST_NAMES: [&str; 12] = ["Ada", "Ben", "Chen", "Dara", "Eli", "Fatima", "Goran", "Hana", "Ivan", "Jun", "Kofi", "Lena"];
const LAST_NAMES: [&str; 10] = ["Abbott", "Baker", "Cruz", "Dietz", "Evans", "Fox", "Garcia", "Hale", "Ito", "Jensen"];
const REGIONS: [&str; 4] = ["north", "south", "east", "west"];

/// Lifecycle choice values of the work table; labels come from the industry.
pub const WORK_STATES: [i64; 5] = [1, 2, 3, 6, 7];

/// Text fields reserved for injected conflicts, with the choice field that triggers them.
const CONFLICT_SLOTS: [(Role, &str, &str); 4] = [
    (Role::Work, "u_state", "u_work_notes"),
    (Role::Task, "u_state", "u_note"),
    (Role::Ci, "u_status", "u_owner_note"),
    (Role::Approval, "u_state", "u_comment"),
];

fn level_choices() -> [(i64, &'static str); 3] {
    [(1, "High"), (2, "Medium"), (3, "Low")]
}

fn priority_field(name: &str) -> FieldDef {
    FieldDef::choice(name, &[(1, "Critical"), (2, "High"), (3, "Moderate"), (4, "Low")]).with_default(4)
}

struct Builder {
    profile: WorldProfile,
    vocab: &'static Vocab,
    registry: SchemaRegistry,
    roles: BTreeMap<Role, String>,
    records: BTreeMap<String, Vec<FieldMap>>,
    matrix: Option<PriorityMatrix>,
    rules: Vec<RuleDef>,
    slas: Vec<SlaDefinition>,
    acl: Option<AclPolicy>,
    done: BTreeSet<Stage>,
    stage: Stage,
}

impl Builder {
    fn violated(&self, detail: impl Into<String>) -> WorldgenError {
        WorldgenError::GenerationInvariantViolated { stage: self.stage, detail: detail.into() }
    }

    fn table(&self, role: Role) -> Result<String, WorldgenError> {
        self.roles
            .get(&role)
            .cloned()
            .ok_or_else(|| self.violated(format!("the {role:?} table is not materialized")))
    }

    fn define(&mut self, role: Role, schema: TableSchema) -> Result<(), WorldgenError> {
        let name = schema.name.clone();
        self.registry.define_table(schema).map_err(|e| self.violated(e.to_string()))?;
        self.roles.insert(role, name.clone());
        self.records.entry(name).or_default();
        Ok(())
    }

    fn push(&mut self, table: &str, values: FieldMap) -> RecordId {
        let list = self.records.entry(table.to_string()).or_default();
        list.push(values);
        format_id(table, list.len() as u64)
    }

    fn pool(&self, role: Role) -> Result<Vec<RecordId>, WorldgenError> {
        let t = self.table(role)?;
        let n = self.records.get(&t).map_or(0, Vec::len);
        if n == 0 {
            return Err(self.violated(format!("the {role:?} pool is empty")));
        }
        Ok((1..=n as u64).map(|i| format_id(&t, i)).collect())
    }

    fn run(&mut self, stage: Stage) -> Result<(), WorldgenError> {
        self.stage = stage;
        if self.done.contains(&stage) {
            return Err(self.violated("stage ran twice"));
        }
        if let Some(missing) = stage.prerequisites().iter().find(|p| !self.done.contains(p)) {
            return Err(self.violated(format!("prerequisite stage {missing} has not run")));
        }
        let mut rng = self.profile.rng(Stage::ALL.iter().position(|s| *s == stage).unwrap_or(0) as u64);
        match stage {
            Stage::Organization => self.organization(&mut rng)?,
            Stage::ConfigItems => self.config_items(&mut rng)?,
            Stage::Lifecycles => self.lifecycles(&mut rng)?,
            Stage::Rules => self.rules(&mut rng)?,
            Stage::Acl => self.access()?,
            Stage::Slas => self.slas()?,
            Stage::Constraints => self.constraints()?,
        }
        self.done.insert(stage);
        Ok(())
    }

    fn organization(&mut self, rng: &mut ChaCha8Rng) -> Result<(), WorldgenError> {
        let v = self.vocab;
        let (groups, users, _, _) = self.profile.pools();
        self.define(
            Role::Group,
            TableSchema::new(
                v.tables[0],
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::integer("u_load"),
                    FieldDef::boolean("u_active").with_default(true),
                    FieldDef::text("u_region"),
                ],
            ),
        )?;
        self.define(
            Role::User,
            TableSchema::new(
                v.tables[1],
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::reference("u_group", v.tables[0]),
                    FieldDef::boolean("u_active").with_default(true),
                    FieldDef::integer("u_notification").with_default(2),
                    FieldDef::boolean("u_locked_out"),
                    FieldDef::text("u_email"),
                ],
            ),
        )?;
        for name in &v.groups[..groups] {
            let region = REGIONS.choose(rng).expect("non-empty");
            self.push(v.tables[0], record([("u_name", Value::text(*name)), ("u_region", Value::text(*region))]));
        }
        let group_pool = self.pool(Role::Group)?;
        for _ in 0..users {
            let first = FIRST_NAMES.choose(rng).expect("non-empty");
            let last = LAST_NAMES.choose(rng).expect("non-empty");
            let group = group_pool.choose(rng).expect("non-empty").clone();
            let email = format!("{}.{}@{}.example", first.to_lowercase(), last.to_lowercase(), v.domain);
            self.push(
                v.tables[1],
                record([
                    ("u_name", Value::text(format!("{first} {last}"))),
                    ("u_group", Value::Text(group)),
                    ("u_email", Value::Text(email)),
                ]),
            );
        }
        Ok(())
    }

    fn config_items(&mut self, rng: &mut ChaCha8Rng) -> Result<(), WorldgenError> {
        let v = self.vocab;
        let (_, _, cis, _) = self.profile.pools();
        let group_table = self.table(Role::Group)?;
        let group_pool = self.pool(Role::Group)?;
        let ci = v.tables[2];
        self.define(
            Role::Ci,
            TableSchema::new(
                ci,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::reference("u_group", &group_table),
                    FieldDef::choice("u_criticality", &level_choices()).with_default(3),
                    FieldDef::reference("u_depends_on", ci),
                    FieldDef::choice("u_status", &[(1, "Operational"), (2, "Degraded"), (3, "Down")]),
                    FieldDef::text("u_owner_note"),
                ],
            ),
        )?;
        for i in 0..cis {
            let mut r = record([
                ("u_name", Value::text(format!("{}-{:02}", v.ci_prefix, i + 1))),
                ("u_group", Value::Text(group_pool.choose(rng).expect("non-empty").clone())),
                ("u_criticality", Value::Int(rng.gen_range(1..=3))),
            ]);
            // Edges only point at earlier items, so the dependency graph is acyclic.
            if i > 0 && rng.gen_bool(0.6) {
                r.insert("u_depends_on".into(), Value::Text(format_id(ci, rng.gen_range(1..=i as u64))));
            }
            self.push(ci, r);
        }
        Ok(())
    }

    fn lifecycles(&mut self, rng: &mut ChaCha8Rng) -> Result<(), WorldgenError> {
        let v = self.vocab;
        let (group_t, user_t, ci_t) = (self.table(Role::Group)?, self.table(Role::User)?, self.table(Role::Ci)?);
        let (groups, users, cis) = (self.pool(Role::Group)?, self.pool(Role::User)?, self.pool(Role::Ci)?);
        let (work, task, esc, note, appr) = (v.tables[3], v.tables[4], v.tables[5], v.tables[6], v.tables[7]);
        let states: Vec<(i64, &str)> = WORK_STATES.iter().copied().zip(v.states.iter().copied()).collect();
        let three = [(1, "Open"), (2, "Working"), (3, "Done")];
        self.define(
            Role::Work,
            TableSchema::new(
                work,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::choice("u_state", &states),
                    FieldDef::choice("u_urgency", &level_choices()).with_default(3),
                    FieldDef::choice("u_impact", &level_choices()).with_default(3),
                    priority_field("u_priority"),
                    FieldDef::reference("u_assignment_group", &group_t),
                    FieldDef::reference("u_caller", &user_t),
                    FieldDef::reference("u_ci", &ci_t),
                    FieldDef::text("u_queue"),
                    FieldDef::boolean("u_major"),
                    FieldDef::integer("u_reassign_count"),
                    FieldDef::integer("u_escalation_level"),
                    FieldDef::text("u_resolution"),
                    FieldDef::text("u_category"),
                    FieldDef::text("u_work_notes"),
                    FieldDef::datetime("u_due"),
                ],
            ),
        )?;
        self.define(
            Role::Task,
            TableSchema::new(
                task,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::reference("u_parent", work),
                    FieldDef::choice("u_state", &three),
                    FieldDef::reference("u_assignment_group", &group_t),
                    priority_field("u_priority"),
                    FieldDef::integer("u_step"),
                    FieldDef::text("u_note"),
                ],
            ),
        )?;
        self.define(
            Role::Escalation,
            TableSchema::new(
                esc,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::reference("u_work", work),
                    FieldDef::integer("u_level").with_default(1),
                    FieldDef::text("u_reason"),
                    FieldDef::choice("u_state", &three),
                    FieldDef::text("u_owner"),
                ],
            ),
        )?;
        self.define(
            Role::Notification,
            TableSchema::new(
                note,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::text("u_channel").with_default("email"),
                    FieldDef::reference("u_recipient", &user_t),
                    FieldDef::text("u_body"),
                    FieldDef::boolean("u_sent"),
                ],
            ),
        )?;
        self.define(
            Role::Approval,
            TableSchema::new(
                appr,
                vec![
                    FieldDef::text("u_name"),
                    FieldDef::reference("u_work", work),
                    FieldDef::choice("u_state", &[(1, "Requested"), (2, "Approved"), (3, "Rejected")]),
                    FieldDef::reference("u_approver", &user_t),
                    FieldDef::text("u_comment"),
                    FieldDef::integer("u_round"),
                ],
            ),
        )?;
        self.define(Role::SlaTimer, sla_timer_table())?;
        let matrix = PriorityMatrix::standard();
        let (_, _, _, n) = self.profile.pools();
        for i in 0..n {
            let (u, imp) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let priority = matrix.priority(u, imp).expect("matrix is total");
            let group = groups.choose(rng).expect("non-empty").clone();
            let queue = self.group_name(&group)?;
            let category = *v.categories.choose(rng).expect("non-empty");
            let id = self.push(
                work,
                record([
                    ("u_name", Value::text(format!("{} {}", v.states[0], i + 1))),
                    ("u_state", Value::Int(*[1, 2].choose(rng).expect("non-empty"))),
                    ("u_urgency", Value::Int(u)),
                    ("u_impact", Value::Int(imp)),
                    ("u_priority", Value::Int(priority)),
                    ("u_assignment_group", Value::Text(group.clone())),
                    ("u_caller", Value::Text(users.choose(rng).expect("non-empty").clone())),
                    ("u_ci", Value::Text(cis.choose(rng).expect("non-empty").clone())),
                    ("u_queue", Value::Text(queue)),
                    ("u_category", Value::text(category)),
                ]),
            );
            self.push(
                task,
                record([
                    ("u_name", Value::text(format!("Task {}", i + 1))),
                    ("u_parent", Value::Text(id.clone())),
                    ("u_assignment_group", Value::Text(group)),
                    ("u_priority", Value::Int(priority)),
                ]),
            );
            if i % 3 == 0 {
                self.push(
                    appr,
                    record([
                        ("u_name", Value::text(format!("Approval {}", i / 3 + 1))),
                        ("u_work", Value::Text(id)),
                        ("u_approver", Value::Text(users.choose(rng).expect("non-empty").clone())),
                        ("u_round", Value::Int(1)),
                    ]),
                );
            }
        }
        self.matrix = Some(matrix);
        Ok(())
    }

    fn group_name(&self, id: &str) -> Result<String, WorldgenError> {
        let t = self.table(Role::Group)?;
        let idx = self.pool(Role::Group)?.iter().position(|g| g == id);
        idx.and_then(|i| self.records[&t][i].get("u_name"))
            .and_then(Value::as_text)
            .map(String::from)
            .ok_or_else(|| self.violated(format!("group `{id}` is not materialized")))
    }

    fn rules(&mut self, rng: &mut ChaCha8Rng) -> Result<(), WorldgenError> {
        let roles = self.roles.clone();
        let lookup = move |r: Role| roles.get(&r).cloned().unwrap_or_default();
        for r in Role::ALL {
            self.table(r)?;
        }
        let categories: Vec<String> = self.vocab.categories.iter().map(|c| c.to_string()).collect();
        let groups = self
            .pool(Role::Group)?
            .into_iter()
            .map(|id| self.group_name(&id).map(|n| (id, n)))
            .collect::<Result<Vec<_>, _>>()?;
        let holes = templates::Holes { table: &lookup, categories: &categories, groups: &groups };
        let catalog = templates::catalog();
        let mut order: Vec<usize> = (0..catalog.len()).collect();
        order.shuffle(rng);
        let want = self.profile.rule_count().min(catalog.len());
        let mut taken: BTreeSet<(String, String)> = BTreeSet::new();
        for idx in order {
            if self.rules.len() == want {
                break;
            }
            let t = &catalog[idx];
            let def = t.instantiate(&holes, rng, &format!("br_{}", t.name));
            let rule = BusinessRule::compile(def, &self.registry).map_err(|e| self.violated(e.to_string()))?;
            let keys: BTreeSet<(String, String)> =
                rule.update_keys().into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
            // Greedy acceptance: template rules never share a non-creation write.
            if keys.is_disjoint(&taken) {
                taken.extend(keys);
                self.rules.push(rule.def);
            }
        }
        Ok(())
    }

    fn access(&mut self) -> Result<(), WorldgenError> {
        let tables = self.registry.table_names().map(|t| (t.to_string(), true)).collect();
        self.acl = Some(AclPolicy { rules_readable: true, tables });
        Ok(())
    }

    fn slas(&mut self) -> Result<(), WorldgenError> {
        let work = self.table(Role::Work)?;
        let task = self.table(Role::Task)?;
        self.table(Role::SlaTimer)?;
        let mut slas = vec![
            sla("p1_response", &work, "changes_to(u_priority, 1)", "1h"),
            sla("p2_response", &work, "changes_to(u_priority, 2)", "4h"),
        ];
        if self.profile.automation_level == Automation::Heavy {
            slas.push(sla("major_response", &work, "changes_to(u_major, true)", "30m"));
            slas.push(sla("task_p1_resolution", &task, "changes_to(u_priority, 1)", "2h"));
        }
        for s in &slas {
            for def in s.compile() {
                BusinessRule::compile(def, &self.registry).map_err(|e| self.violated(e.to_string()))?;
            }
        }
        self.slas = slas;
        Ok(())
    }

    fn constraints(&mut self) -> Result<(), WorldgenError> {
        let work = self.table(Role::Work)?;
        let mut schema = self.registry.require(&work).map_err(|e| self.violated(e.to_string()))?.clone();
        for f in schema.fields_mut() {
            match f.name.as_str() {
                "u_category" => f.default = Some(Value::text(self.vocab.categories[0])),
                "u_queue" => f.default = Some(Value::text("unassigned")),
                _ => {}
            }
        }
        self.registry.redefine_table(schema).map_err(|e| self.violated(e.to_string()))?;
        Ok(())
    }

    fn finish(self) -> Result<World, WorldgenError> {
        if let Some(missing) = Stage::ALL.iter().find(|s| !self.done.contains(s)) {
            return Err(WorldgenError::GenerationInvariantViolated {
                stage: *missing,
                detail: "stage never ran".into(),
            });
        }
        let fail = |detail: String| WorldgenError::GenerationInvariantViolated { stage: Stage::Constraints, detail };
        let reg = std::sync::Arc::new(self.registry.clone());
        let mut store = Store::new(reg.clone());
        // Registry order respects reference direction, so targets load first.
        for t in reg.table_names() {
            for (i, values) in self.records.get(t).into_iter().flatten().enumerate() {
                let id = store.bulk_insert(t, values).map_err(|e| fail(e.to_string()))?;
                if id != format_id(t, i as u64 + 1) {
                    return Err(fail(format!("record `{id}` was materialized out of order")));
                }
            }
        }
        if !store.log().is_empty() {
            return Err(fail("bulk seed insertion produced audit entries".into()));
        }
        for t in reg.table_names() {
            for (id, values) in store.records(t) {
                let v = check_record(&reg, t, values, &store).map_err(|e| fail(e.to_string()))?;
                if !v.is_empty() {
                    return Err(fail(format!("seed record `{id}` is invalid: {v:?}")));
                }
            }
        }
        let world = World {
            profile: self.profile,
            registry: self.registry,
            seed: store.snapshot(),
            rules: self.rules,
            slas: self.slas,
            acl: self.acl.expect("acl stage ran"),
            priority_matrix: self.matrix.expect("lifecycle stage ran"),
            conflict_pairs: Vec::new(),
            roles: self.roles,
        };
        verify_references(&world).map_err(fail)?;
        world.engine().map_err(|e| fail(e.to_string()))?;
        Ok(world)
    }
}

fn record<const N: usize>(pairs: [(&str, Value); N]) -> FieldMap {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn sla(id: &str, table: &str, start: &str, duration: &str) -> SlaDefinition {
    SlaDefinition {
        id: id.into(),
        table: table.into(),
        start_condition: start.into(),
        duration_tag: duration.into(),
    }
}

/// Every literal a rule stores into a reference field names a seed record.
fn verify_references(world: &World) -> Result<(), String> {
    for def in &world.rules {
        let rule = BusinessRule::compile(def.clone(), &world.registry).map_err(|e| e.to_string())?;
        for s in &rule.program.script.stmts {
            let target = s.target_table().unwrap_or(&def.table);
            for a in s.assigns() {
                let Some(fd) = world.registry.field(target, &a.field) else { continue };
                if let (FieldKind::Reference, Expr::Lit(Value::Text(id))) = (fd.kind, &a.expr) {
                    let rt = fd.ref_table.as_deref().unwrap_or_default();
                    if world.seed.record(rt, id).is_none() {
                        return Err(format!("rule `{}` references missing record `{id}`", def.id));
                    }
                }
            }
            if let Stmt::Insert { table, .. } = s {
                world.registry.require(table).map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(())
}

/// Run the seven stages in the default order, then inject conflicts at the
/// profile's density.
pub fn generate_world(profile: &WorldProfile) -> Result<World, WorldgenError> {
    generate_world_with_stages(profile, Stage::ALL)
}

/// Run `stages` in the given order. Any order that runs a stage before one of
/// its prerequisites fails with `GenerationInvariantViolated`.
pub fn generate_world_with_stages(profile: &WorldProfile, stages: &[Stage]) -> Result<World, WorldgenError> {
    profile.validate()?;
    let mut b = Builder {
        profile: profile.clone(),
        vocab: vocab(profile.industry),
        registry: SchemaRegistry::new(),
        roles: BTreeMap::new(),
        records: BTreeMap::new(),
        matrix: None,
        rules: Vec::new(),
        slas: Vec::new(),
        acl: None,
        done: BTreeSet::new(),
        stage: Stage::Organization,
    };
    for s in stages {
        b.run(*s)?;
    }
    let world = b.finish()?;
    if profile.conflict_density > 0.0 {
        inject_conflicts(&world, profile.conflict_density, profile.seed)
    } else {
        Ok(world)
    }
}

/// Tables that can host one more conflict pair.
pub fn eligible_conflict_tables(world: &World) -> Vec<(Role, String)> {
    CONFLICT_SLOTS
        .iter()
        .filter_map(|(role, trigger, field)| {
            let t = world.roles.get(role)?;
            let has = |f: &str| world.registry.field(t, f).is_some();
            let used = world.conflict_pairs.iter().any(|p| &p.table == t);
            (has(trigger) && has(field) && !used).then(|| (*role, t.clone()))
        })
        .collect()
}

/// Add `round(density × eligible)` pairs of after-update rules. Both rules of
/// a pair fire on a change to the table's state field and write distinct
/// literals to the same reserved text field at distinct orders.
pub fn inject_conflicts(world: &World, density: f64, seed: u64) -> Result<World, WorldgenError> {
    check_density(density)?;
    let mut eligible = eligible_conflict_tables(world);
    if density > 0.0 && eligible.is_empty() {
        return Err(WorldgenError::NoEligibleTable);
    }
    let count = (density * eligible.len() as f64).round() as usize;
    let mut out = world.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC0);
    eligible.shuffle(&mut rng);
    for (role, table) in eligible.into_iter().take(count) {
        let (_, trigger, field) = CONFLICT_SLOTS.iter().find(|s| s.0 == role).expect("slot exists");
        let base = rng.gen_range(1..=8) * 100 + 50;
        let orders = [base, base + 100];
        let values = [Value::text(format!("{field} policy A")), Value::text(format!("{field} policy B"))];
        let ids = [format!("conflict_{table}_a"), format!("conflict_{table}_b")];
        for k in 0..2 {
            let src = format!("WHEN changes({trigger}) DO SET {field} = {}", crate::dsl::print::literal(&values[k]));
            out.rules.push(RuleDef::new(&ids[k], &table, Operation::Update, Phase::After, orders[k], &src));
        }
        out.conflict_pairs.push(ConflictPair {
            table,
            field: field.to_string(),
            rules: ids,
            values,
            orders,
            trigger_field: trigger.to_string(),
        });
    }
    out.engine().map_err(|e| WorldgenError::GenerationInvariantViolated {
        stage: Stage::Rules,
        detail: format!("injected conflict rules do not register: {e}"),
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::canonical_json;
    use proptest::prelude::*;

    fn profile(industry: Industry, density: f64, seed: u64) -> WorldProfile {
        WorldProfile::new(industry, Size::Small, Automation::Light, density, seed)
    }

    #[test]
    fn small_light_technology_world_has_structural_floor() {
        let w = generate_world(&profile(Industry::Technology, 0.0, 1)).unwrap();
        assert!(w.registry.len() >= 3);
        assert!(w.rules.len() >= 2);
        assert!(w.conflict_pairs.is_empty());
        assert!(w.detect_conflicts().unwrap().is_empty());
        assert!(w.priority_matrix.is_valid());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = WorldProfile::new(Industry::Finance, Size::Midmarket, Automation::Heavy, 0.5, 77);
        let a = canonical_json(&generate_world(&p).unwrap()).unwrap();
        let b = canonical_json(&generate_world(&p).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn density_only_adds_conflict_rules() {
        let a = generate_world(&profile(Industry::Retail, 0.0, 9)).unwrap();
        let mut b = generate_world(&profile(Industry::Retail, 1.0, 9)).unwrap();
        assert_eq!(b.conflict_pairs.len(), 4);
        let injected: BTreeSet<String> = b.conflict_pairs.iter().flat_map(|p| p.rules.clone()).collect();
        assert_eq!(injected.len(), 8);
        b.rules.retain(|r| !injected.contains(&r.id));
        b.conflict_pairs.clear();
        b.profile.conflict_density = 0.0;
        assert_eq!(canonical_json(&a).unwrap(), canonical_json(&b).unwrap());
    }

    #[test]
    fn injection_counts_and_errors() {
        let w = generate_world(&profile(Industry::Healthcare, 0.0, 3)).unwrap();
        assert_eq!(inject_conflicts(&w, 0.0, 1).unwrap(), w);
        let two = inject_conflicts(&w, 0.5, 1).unwrap();
        assert_eq!(two.rules.len(), w.rules.len() + 4);
        assert_eq!(two.conflict_pairs.len(), 2);
        for p in &two.conflict_pairs {
            assert_ne!(p.values[0], p.values[1]);
            assert_ne!(p.orders[0], p.orders[1]);
        }
        let full = inject_conflicts(&w, 1.0, 1).unwrap();
        assert!(matches!(inject_conflicts(&full, 0.3, 1), Err(WorldgenError::NoEligibleTable)));
        assert!(matches!(inject_conflicts(&w, 1.5, 1), Err(WorldgenError::InvalidProfile(_))));
    }

    #[test]
    fn industries_are_structurally_distinguishable() {
        for (i, a) in Industry::ALL.iter().enumerate() {
            for b in &Industry::ALL[i + 1..] {
                let wa = generate_world(&profile(*a, 0.0, 5)).unwrap();
                let wb = generate_world(&profile(*b, 0.0, 5)).unwrap();
                assert_ne!(canonical_json(&wa.rules).unwrap(), canonical_json(&wb.rules).unwrap());
                let ta: BTreeSet<_> = wa.registry.table_names().collect();
                let tb: BTreeSet<_> = wb.registry.table_names().collect();
                assert_eq!(ta.intersection(&tb).count(), 1, "only the timer table is shared");
            }
        }
    }

    #[test]
    fn seed_insertion_leaves_no_audits() {
        let w = generate_world(&profile(Industry::Manufacturing, 0.0, 2)).unwrap();
        let store = Store::from_snapshot(w.registry_arc(), &w.seed).unwrap();
        assert!(store.log().is_empty());
        assert!(w.seed.record_count() > 0);
    }

    #[test]
    fn every_profile_generates() {
        for ind in Industry::ALL {
            for size in Size::ALL {
                for auto in Automation::ALL {
                    let w = generate_world(&WorldProfile::new(*ind, *size, *auto, 1.0, 11)).unwrap();
                    let want = WorldProfile::new(*ind, *size, *auto, 0.0, 0).rule_count();
                    assert_eq!(w.rules.len(), want + 8);
                }
            }
        }
    }

    #[test]
    fn skipping_a_stage_is_an_invariant_violation() {
        let p = profile(Industry::Technology, 0.0, 1);
        let stages = [Stage::Organization, Stage::Lifecycles];
        let e = generate_world_with_stages(&p, &stages).unwrap_err();
        assert!(matches!(e, WorldgenError::GenerationInvariantViolated { stage: Stage::Lifecycles, .. }));
        let e = generate_world_with_stages(&p, &Stage::ALL[..6]).unwrap_err();
        assert!(matches!(e, WorldgenError::GenerationInvariantViolated { stage: Stage::Constraints, .. }));
    }

    fn respects_prerequisites(order: &[Stage]) -> bool {
        order.iter().enumerate().all(|(i, s)| s.prerequisites().iter().all(|p| order[..i].contains(p)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shuffled_stages_fail_exactly_when_order_is_broken(perm in Just(Stage::ALL.to_vec()).prop_shuffle(), seed in 0u64..1000) {
            let p = profile(Industry::PublicSector, 0.0, seed);
            let r = generate_world_with_stages(&p, &perm);
            if respects_prerequisites(&perm) {
                prop_assert!(r.is_ok());
            } else {
                let is_violation = matches!(r, Err(WorldgenError::GenerationInvariantViolated { .. }));
                prop_assert!(is_violation);
            }
        }

        #[test]
        fn generated_worlds_validate(seed in any::<u64>(), ind in 0usize..6, density in 0.0f64..=1.0) {
            let p = WorldProfile::new(Industry::ALL[ind], Size::Small, Automation::Heavy, density, seed);
            let w = generate_world(&p).unwrap();
            prop_assert!(w.priority_matrix.is_valid());
            let waived: BTreeSet<(String, String)> =
                w.conflict_pairs.iter().map(|p| (p.rules[0].clone(), p.rules[1].clone())).collect();
            for c in w.detect_conflicts().unwrap() {
                prop_assert!(waived.contains(&c.rules));
            }
        }
    }
}
