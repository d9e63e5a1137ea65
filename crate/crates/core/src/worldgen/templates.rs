//! Parameterized business-rule patterns.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::print::literal;
use crate::engine::{Operation, Phase, RuleDef};
use crate::world::Role;
use crate::value::Value;

/// The kind of dynamics a pattern produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierClass {
    Assignment,
    Escalation,
    Counter,
    ChildInsert,
    StatusPropagation,
    NotificationInsert,
    SlaStart,
    ConflictPair,
}

/// Values a template may plug into its holes.
pub struct Holes<'a> {
    pub table: &'a dyn Fn(Role) -> String,
    pub categories: &'a [String],
    pub groups: &'a [(String, String)],
}

impl Holes<'_> {
    fn t(&self, r: Role) -> String {
        (self.table)(r)
    }

    fn category(&self, rng: &mut ChaCha8Rng) -> String {
        literal(&Value::text(self.categories.choose(rng).expect("categories are never empty").clone()))
    }

    fn group(&self, rng: &mut ChaCha8Rng) -> (String, String) {
        let (id, name) = self.groups.choose(rng).expect("groups are materialized before rules");
        (literal(&Value::text(id.clone())), literal(&Value::text(name.clone())))
    }
}

pub struct PatternTemplate {
    pub name: &'static str,
    pub trigger: Role,
    pub operation: Operation,
    pub phase: Phase,
    pub class: TierClass,
    fill: fn(&Holes<'_>, &mut ChaCha8Rng) -> String,
}

impl PatternTemplate {
    /// Instantiate with holes filled from `rng`; the order is drawn from 100..=900.
    pub fn instantiate(&self, holes: &Holes<'_>, rng: &mut ChaCha8Rng, id: &str) -> RuleDef {
        let order = rng.gen_range(1..=9) * 100;
        let source = (self.fill)(holes, rng);
        RuleDef::new(id, &holes.t(self.trigger), self.operation, self.phase, order, &source)
    }
}

macro_rules! template {
    ($name:expr, $role:ident, $op:ident, $phase:ident, $class:ident, $fill:expr) => {
        PatternTemplate {
            name: $name,
            trigger: Role::$role,
            operation: Operation::$op,
            phase: Phase::$phase,
            class: TierClass::$class,
            fill: $fill,
        }
    };
}

/// The shipped catalog.
pub fn catalog() -> Vec<PatternTemplate> {
    vec![
        template!("assign_by_category", Work, Insert, After, Assignment, |h, rng| {
            let (gid, gname) = h.group(rng);
            format!("WHEN u_category == {} DO SET u_queue = {gname}; SET u_assignment_group = {gid}", h.category(rng))
        }),
        template!("major_flag", Work, Insert, Before, Assignment, |_, rng| {
            let u = rng.gen_range(1..=2);
            format!("WHEN u_urgency <= {u} AND u_impact == 1 DO SET u_major = true")
        }),
        template!("priority_escalation", Work, Update, After, Escalation, |h, _| {
            format!(
                r#"WHEN changes_to(u_priority, 1) DO INSERT {} {{ u_name = "Priority raised", u_work = cur.id, u_reason = "priority 1" }}"#,
                h.t(Role::Escalation)
            )
        }),
        template!("reassignment_counter", Work, Update, After, Counter, |_, _| {
            "WHEN changes(u_assignment_group) DO SET u_reassign_count = cur.u_reassign_count + 1".to_string()
        }),
        template!("triage_task", Work, Insert, After, ChildInsert, |h, rng| {
            format!(
                r#"WHEN u_category == {} DO INSERT {} {{ u_name = "Triage", u_parent = cur.id, u_priority = cur.u_priority }}"#,
                h.category(rng),
                h.t(Role::Task)
            )
        }),
        template!("resolve_parent", Task, Update, After, StatusPropagation, |h, _| {
            format!(
                "WHEN changes_to(u_state, 3) AND u_parent != null DO SET_ON {} WHERE id == cur.u_parent: u_state = 6",
                h.t(Role::Work)
            )
        }),
        template!("resolution_notice", Work, Update, After, NotificationInsert, |h, _| {
            format!(
                r#"WHEN changes_to(u_state, 6) DO INSERT {} {{ u_name = "Resolved", u_body = "work item resolved" }}"#,
                h.t(Role::Notification)
            )
        }),
        template!("expedite_approval", Work, Update, After, ChildInsert, |h, rng| {
            let p = rng.gen_range(1..=2);
            format!(
                r#"WHEN changes_to(u_state, 2) AND u_priority <= {p} DO INSERT {} {{ u_name = "Expedite", u_work = cur.id }}"#,
                h.t(Role::Approval)
            )
        }),
        template!("approval_outcome", Approval, Update, After, StatusPropagation, |h, _| {
            format!(
                r#"WHEN changes_to(u_state, 2) AND u_work != null DO SET_ON {} WHERE id == cur.u_work: u_resolution = "approved""#,
                h.t(Role::Work)
            )
        }),
        template!("dependency_degrade", Ci, Update, After, StatusPropagation, |h, _| {
            format!("WHEN changes_to(u_status, 3) DO SET_ON {} WHERE u_depends_on == cur.id: u_status = 2", h.t(Role::Ci))
        }),
        template!("outage_notice", Ci, Update, After, NotificationInsert, |h, _| {
            format!(
                r#"WHEN changes_to(u_status, 3) DO INSERT {} {{ u_name = "Outage", u_body = "service down" }}"#,
                h.t(Role::Notification)
            )
        }),
        template!("lockout_deactivate", User, Update, After, Assignment, |_, _| {
            "WHEN changes_to(u_locked_out, true) DO SET u_active = false".to_string()
        }),
        template!("task_first_step", Task, Insert, Before, Assignment, |_, rng| {
            let p = rng.gen_range(1..=2);
            format!("WHEN u_priority <= {p} DO SET u_step = 1")
        }),
        template!("group_load", Work, Insert, Async, Counter, |h, _| {
            format!(
                "WHEN u_assignment_group != null DO SET_ON {} WHERE id == cur.u_assignment_group: u_load = cur.u_priority",
                h.t(Role::Group)
            )
        }),
        template!("major_escalation", Work, Update, After, Escalation, |h, _| {
            format!(
                r#"WHEN changes_to(u_major, true) DO INSERT {} {{ u_name = "Major incident", u_work = cur.id, u_level = 2 }}"#,
                h.t(Role::Escalation)
            )
        }),
        template!("escalation_level", Escalation, Insert, After, Escalation, |h, _| {
            format!(
                "WHEN u_work != null DO SET_ON {} WHERE id == cur.u_work: u_escalation_level = cur.u_level",
                h.t(Role::Work)
            )
        }),
    ]
}
