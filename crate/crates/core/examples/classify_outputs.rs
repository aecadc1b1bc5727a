//! Sorts candidate answers to one puzzle into reasoning categories.

use coconut::eval::{classify, parse_output};
use coconut::prosqa::oracle::{all_paths_from, shortest_paths};
use coconut::prosqa::render::statement;
use coconut::prosqa::{generate_instance, GeneratorConfig, Puzzle, Split};

fn main() -> coconut::Result<()> {
    let (inst, _) = generate_instance(&GeneratorConfig::default(), 2, Split::Test, 3)?;
    let ex = &inst.example;
    let p = Puzzle::from_example(ex)?;
    println!("{}\n", ex.question);

    let mut has_parent = vec![false; p.names.len()];
    for (_, b) in p.edges() {
        has_parent[b] = true;
    }
    let is_root: Vec<bool> = has_parent.iter().map(|h| !h).collect();
    let entity = &p.names[p.entity];
    let walk = |path: &[usize]| {
        let mut s: Vec<String> = path.windows(2).map(|w| statement(&p.names, &is_root, w[0], w[1])).collect();
        s.push(format!("{entity} is a {}.", p.names[*path.last().unwrap()]));
        s.join(" ")
    };

    let (shortest, _) = shortest_paths(&p.children, p.entity, p.correct);
    let paths = all_paths_from(&p.children, p.entity);
    let mut candidates = vec![(0, format!("{} {}", ex.steps.join(" "), ex.answer))];
    if let Some(longer) = paths.iter().find(|q| q.last() == Some(&p.correct) && Some(q.len() - 1) > shortest) {
        candidates.push((0, walk(longer)));
    }
    if let Some(elsewhere) = paths.iter().find(|q| q.len() > 2 && q.last() != Some(&p.correct)) {
        candidates.push((0, walk(elsewhere)));
    }
    candidates.push((0, format!("{entity} is a {}. {}", p.names[p.correct], ex.answer)));
    candidates.push((ex.steps.len(), ex.answer.clone()));
    candidates.push((ex.steps.len(), format!("{entity} is a {}.", p.names[p.incorrect])));

    for (k, text) in candidates {
        let category = classify(&parse_output(&text, &p), k, &p);
        println!("k={k} {:<16} {text}", category.name());
    }
    Ok(())
}
