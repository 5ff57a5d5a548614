use super::*;
use crate::space::{AlgorithmSpace, ParamSpec};
use crate::tree::Tree;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adaboost() -> SearchSpace {
    SearchSpace::new(
        vec![AlgorithmSpace {
            id: "adaboost".into(),
            params: vec![
                ParamSpec::cat("algorithm", &["SAMME.R", "SAMME"]),
                ParamSpec::float("learning_rate", 1e-2, 2.0, true),
                ParamSpec::int("max_depth", 2, 8, false),
                ParamSpec::int("n_estimators", 50, 500, false),
            ],
        }],
        TaskKind::Classification,
        "balanced_accuracy",
    )
    .unwrap()
}

fn cfg(lr: f64, depth: i64, n: i64) -> Configuration {
    let mut values = std::collections::BTreeMap::new();
    values.insert("algorithm".into(), ParamValue::Cat("SAMME".into()));
    values.insert("learning_rate".into(), ParamValue::Float(lr));
    values.insert("max_depth".into(), ParamValue::Int(depth));
    values.insert("n_estimators".into(), ParamValue::Int(n));
    Configuration { algorithm: "adaboost".into(), values }
}

fn episode(node: NodeId, parent: Option<(Configuration, f64)>, child: Configuration, y: f64) -> Episode {
    Episode {
        parent_y: parent.as_ref().map(|p| p.1),
        parent_config: parent.map(|p| p.0),
        child_config: child,
        child_y: y,
        reflection: format!("note {node}"),
        child_node: node,
        action: ActionLabel::BoLocal,
    }
}

fn ctx() -> TaskContext {
    TaskContext::for_space(&adaboost(), "A small tabular classification dataset.")
}

fn dominance_oracle(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                points[j].0 >= points[i].0
                    && points[j].1 >= points[i].1
                    && (points[j].0 > points[i].0 || points[j].1 > points[i].1)
            })
        })
        .collect()
}

#[test]
fn pareto_example() {
    assert_eq!(pareto_front(&[(0.9, 0.5), (0.5, 0.9), (0.4, 0.4)]), vec![0, 1]);
    assert_eq!(pareto_front(&[(0.2, 0.3)]), vec![0]);
}

proptest! {
    #[test]
    fn pareto_matches_dominance_oracle(raw in prop::collection::vec((0u8..6, 0u8..6), 1..60)) {
        // small integer grid forces plenty of ties
        let points: Vec<(f64, f64)> = raw.iter().map(|&(a, b)| (a as f64 / 5.0, b as f64 / 5.0)).collect();
        prop_assert_eq!(pareto_front(&points), dominance_oracle(&points));
    }

    #[test]
    fn rendered_config_round_trips(seed in 0u64..500) {
        let space = adaboost();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = space.sample_random("adaboost", &mut rng).unwrap();
        let text = format!("Thought: keep it.\nAction: {}", config_json(&c, &space));
        let parsed = parse_tuning_response(&text, &space, "adaboost").unwrap();
        prop_assert_eq!(parsed.config, c);
        prop_assert_eq!(parsed.thought, "keep it.");
    }
}

fn chain_tree() -> (Tree, Vec<NodeId>) {
    let mut t = Tree::new(["adaboost"]);
    let algo = t.algo_node(0);
    let a = t.add_child(algo, cfg(0.05, 5, 200), ActionLabel::LlmWarmup).unwrap();
    let b = t.add_child(a, cfg(0.04, 5, 265), ActionLabel::LlmExploration).unwrap();
    let c = t.add_child(b, cfg(0.045, 5, 350), ActionLabel::LlmExploitation).unwrap();
    let d = t.add_child(algo, cfg(1.5, 2, 60), ActionLabel::BoRandom).unwrap();
    (t, vec![a, b, c, d])
}

#[test]
fn memory_selection() {
    let space = adaboost();
    let (t, ids) = chain_tree();
    let eps = vec![
        episode(ids[0], None, cfg(0.05, 5, 200), 0.56),
        episode(ids[1], Some((cfg(0.05, 5, 200), 0.56)), cfg(0.04, 5, 265), 0.58),
        episode(ids[2], Some((cfg(0.04, 5, 265), 0.58)), cfg(0.045, 5, 350), 0.5747),
        episode(ids[3], None, cfg(1.5, 2, 60), 0.40),
    ];
    let params = KernelParams::default_for(3);
    let m = select_memory(&eps, &t, ids[2], &params, &space).unwrap();
    let local: Vec<NodeId> = m.local.iter().map(|e| e.child_node).collect();
    assert_eq!(local, ids[..3].to_vec());
    assert!(m.global.iter().all(|e| e.child_config.algorithm == "adaboost"));
    // global is exactly the oracle frontier
    let enc = space.encode(&cfg(0.045, 5, 350)).unwrap();
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .map(|e| {
            let s = e.parent_config.as_ref().unwrap_or(&e.child_config);
            (kernel(&space.encode(s).unwrap(), &enc, &params.unit_signal()).unwrap(), e.child_y)
        })
        .collect();
    let mut want: Vec<NodeId> = dominance_oracle(&pts).into_iter().map(|i| eps[i].child_node).collect();
    let mut got: Vec<NodeId> = m.global.iter().map(|e| e.child_node).collect();
    want.sort_unstable();
    got.sort_unstable();
    assert_eq!(got, want);

    let m = select_memory(&eps[..1], &t, ids[0], &params, &space).unwrap();
    assert_eq!(m.local.len(), 1);
    assert_eq!(m.global.len(), 1);
}

#[test]
fn global_memory_is_capped() {
    let space = adaboost();
    let (t, ids) = chain_tree();
    // identical similarity is impossible to dominate when y rises as sim falls
    let eps: Vec<Episode> = (0..30)
        .map(|i| episode(ids[0], None, cfg(0.01 + 0.05 * i as f64, 5, 200), i as f64))
        .collect();
    let m = select_memory(&eps, &t, ids[0], &KernelParams::default_for(3), &space).unwrap();
    assert_eq!(m.global.len(), GLOBAL_MEMORY_CAP);
}

#[test]
fn directive_order() {
    let (mut t, ids) = chain_tree();
    let algo = t.algo_node(0);
    assert_eq!(choose_directive(t.node(algo), 3).unwrap(), Directive::Warmup);
    assert_eq!(choose_directive(t.node(ids[2]), 3).unwrap(), Directive::Exploration);
    t.add_child(ids[2], cfg(0.03, 5, 300), ActionLabel::LlmExploration).unwrap();
    assert_eq!(choose_directive(t.node(ids[2]), 3).unwrap(), Directive::Exploitation);
    t.add_child(ids[2], cfg(0.03, 6, 300), ActionLabel::LlmExploitation).unwrap();
    assert_eq!(choose_directive(t.node(ids[2]), 3), Err(ProposerError::FullyExpanded));
    t.add_child(algo, cfg(0.03, 6, 300), ActionLabel::BoRandom).unwrap();
    assert_eq!(choose_directive(t.node(algo), 3), Err(ProposerError::FullyExpanded));
}

#[test]
fn tuning_prompt_sections() {
    let space = adaboost();
    let base = cfg(0.045, 5, 350);
    let msgs = build_tuning_prompt(&ctx(), &space, "adaboost", &Memory::default(), Some(&base), Directive::Exploration)
        .unwrap();
    assert_eq!(msgs.len(), 2);
    let user = &msgs[1].content;
    for h in [markers::TASK, markers::DATASET, markers::MEMORY, markers::OUTPUT, markers::TRAJECTORY, markers::TRIALS] {
        assert!(user.contains(h), "missing {h}");
    }
    assert!(user.contains("explore new areas"));
    assert!(user.contains("Your current strategic goal is EXPLORATION."));
    assert!(user.contains(markers::BASE_HEADER));
    assert!(user.contains(r#"{"algorithm": "SAMME", "learning_rate": 0.045, "max_depth": 5, "n_estimators": 350}"#));
    assert!(user.contains("- learning_rate: Float, Range=[0.01, 2] (Log-Scale)"));
    assert!(!user.contains("{{"));

    let warm = build_tuning_prompt(&ctx(), &space, "adaboost", &Memory::default(), None, Directive::Warmup).unwrap();
    let user = &warm[1].content;
    assert!(!user.contains(markers::BASE_HEADER));
    assert!(!user.contains("Historical Trial "));
    assert!(!user.contains("Current Basic Node"));
    assert!(user.contains("from scratch"));
}

#[test]
fn memory_rendering_counts() {
    let space = adaboost();
    let mk = |i: usize| episode(i, Some((cfg(0.05, 5, 200), 0.5)), cfg(0.04, 5, 200 + i as i64), 0.5);
    let memory = Memory { global: vec![mk(1), mk(2)], local: vec![mk(3), mk(4), mk(5)] };
    let msgs =
        build_tuning_prompt(&ctx(), &space, "adaboost", &memory, Some(&cfg(0.04, 5, 205)), Directive::Exploitation)
            .unwrap();
    let user = &msgs[1].content;
    let trials = user.matches("Historical Trial ").count();
    let nodes = user.matches("- Ancestral Node: ").count() + user.matches("- Current Basic Node: ").count();
    assert_eq!((trials, nodes), (2, 3));
    let traj = user.find(markers::TRAJECTORY).unwrap();
    let hist = user.find(markers::TRIALS).unwrap();
    let local_pos = user.find("- Current Basic Node: ").unwrap();
    assert!(traj < local_pos && local_pos < hist);
    assert!(user.contains("Historical Trial A (proposed by BO local search):"));
}

#[test]
fn parses_action_block() {
    let space = adaboost();
    let text = "Thought: Lower the learning rate to keep more estimators stable.\n\
                Action: {\"algorithm\": \"SAMME\", \"learning_rate\": 0.038, \"max_depth\": 5, \"n_estimators\": 300}";
    let p = parse_tuning_response(text, &space, "adaboost").unwrap();
    assert_eq!(p.config.get("n_estimators"), Some(&ParamValue::Int(300)));
    assert_eq!(p.config.get("learning_rate"), Some(&ParamValue::Float(0.038)));
    assert!(p.thought.starts_with("Lower the learning rate"));
}

#[test]
fn clips_and_coerces() {
    let space = adaboost();
    let text = "Action:\n```json\n{\"algorithm\": \"SAMME.R\", \"learning_rate\": 5.0, \"max_depth\": \"6.6\", \
                \"n_estimators\": 10, \"extra\": 1}\n```";
    let p = parse_tuning_response(text, &space, "adaboost").unwrap();
    assert_eq!(p.config.get("learning_rate"), Some(&ParamValue::Float(2.0)));
    assert_eq!(p.config.get("max_depth"), Some(&ParamValue::Int(7)));
    assert_eq!(p.config.get("n_estimators"), Some(&ParamValue::Int(50)));
    assert!(p.config.get("extra").is_none());
}

#[test]
fn picks_last_object_after_action() {
    let space = adaboost();
    let text = "Thought: compare {\"learning_rate\": 0.5} with the base.\nAction: \
                {\"algorithm\": \"SAMME\", \"learning_rate\": 0.1, \"max_depth\": 3, \"n_estimators\": 100}";
    let p = parse_tuning_response(text, &space, "adaboost").unwrap();
    assert_eq!(p.config.get("max_depth"), Some(&ParamValue::Int(3)));
}

#[test]
fn parse_failures() {
    let space = adaboost();
    assert_eq!(parse_tuning_response("I would raise the depth.", &space, "adaboost"), Err(ProposerError::NoJson));
    assert!(matches!(
        parse_tuning_response("Action: {\"algorithm\": \"SAMME\"}", &space, "adaboost"),
        Err(ProposerError::MissingParam(_))
    ));
    let bad = "Action: {\"algorithm\": \"LOGIT\", \"learning_rate\": 0.1, \"max_depth\": 3, \"n_estimators\": 100}";
    assert!(matches!(parse_tuning_response(bad, &space, "adaboost"), Err(ProposerError::InvalidValue { .. })));
}

#[test]
fn reflection_prompt_fields() {
    let space = adaboost();
    let (base, new) = (cfg(0.045, 5, 350), cfg(0.038, 5, 300));
    let trial = TrialOutcome {
        base: Some((&base, 0.57471745)),
        new: (&new, 0.59244859),
        rationale: "Lower the learning rate.",
        rank: (1, 219),
    };
    let msgs = build_reflection_prompt(&ctx(), &space, &Memory::default(), &trial);
    let user = &msgs[1].content;
    assert!(user.contains("(+3.09% relative to basic)"), "{user}");
    assert!(user.contains("1 out of 219 trials"));
    assert!(user.contains(markers::TRIAL_HEADER));
    assert!(user.contains("Reflect on Trial Performance"));
    assert!(!user.contains("{{"));
    assert_eq!(relative_change(0.5, 0.5), "0.00%");
    assert_eq!(relative_change(0.58031504, 0.57471745), "-0.96%");
}

#[test]
fn reflection_parsing() {
    let text = "**Reflection**:\n1. The score rose.\n\n**Reflection Summary**:\nKeep the learning rate near 0.038.";
    let (r, s) = parse_reflection_response(text);
    assert_eq!(r, "1. The score rose.");
    assert_eq!(s, "Keep the learning rate near 0.038.");
    assert_eq!(parse_reflection_response("just words"), (String::new(), "just words".into()));
    assert_eq!(parse_reflection_response(""), (String::new(), String::new()));
}

#[test]
fn bo_summaries() {
    let mut parent = cfg(0.1, 4, 100);
    let mut child = cfg(0.1, 6, 100);
    let s = synthesize_bo_summary(Some((&parent, 0.5)), (&child, 0.506), "accuracy");
    assert_eq!(s, "Increasing max_depth from 4 to 6 improved accuracy by 0.0060 (+1.20%).");
    child.values.insert("learning_rate".into(), ParamValue::Float(0.05));
    let s = synthesize_bo_summary(Some((&parent, 0.5)), (&child, 0.45), "accuracy");
    assert!(s.starts_with("Decreasing learning_rate from 0.1 to 0.05 and increasing max_depth from 4 to 6 worsened"));
    parent = child.clone();
    let s = synthesize_bo_summary(Some((&parent, 0.5)), (&child, 0.5), "accuracy");
    assert!(s.starts_with("No parameter changes; performance delta"));
    let s = synthesize_bo_summary(None, (&child, 0.5), "accuracy");
    assert_eq!(s, "Initial configuration achieved accuracy=0.5.");
}
