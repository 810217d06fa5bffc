//! Scratch census: how many examples share a query triple with another
//! relationship in the same scene (irreducibly conflicting supervision)?

use std::collections::HashMap;

use shiftlab_core::scene::{generate_scene, GenConfig};
use shiftlab_core::train::{build_examples, Example};

fn main() {
    let gen = GenConfig::default();
    let scenes: Vec<_> = (0..2000)
        .map(|i| generate_scene(&gen, 10_000 + i as u64, format!("c{i}")).unwrap())
        .collect();
    let vocab = gen.categories.clone();
    let examples: Vec<Example<f64>> = build_examples(&scenes, &vocab, 14, 0, 17).unwrap();

    // Group by (scene, triple) and count groups of size > 1, split by the
    // ambiguity flag and by whether masks actually differ inside a group.
    let mut groups: HashMap<(usize, usize, usize, usize), Vec<usize>> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let key = (ex.scene, ex.query.subject.unwrap(), ex.query.predicate, ex.query.object.unwrap());
        groups.entry(key).or_default().push(i);
    }
    let (mut amb_total, mut amb_conflict, mut unamb_total, mut unamb_conflict) = (0, 0, 0, 0);
    let mut mask_identical = 0usize;
    for idxs in groups.values() {
        let conflict = idxs.len() > 1;
        let mut same_masks = true;
        if conflict {
            let first = &examples[idxs[0]];
            for &j in &idxs[1..] {
                if examples[j].s_mask.cells != first.s_mask.cells
                    || examples[j].o_mask.cells != first.o_mask.cells
                {
                    same_masks = false;
                }
            }
            if same_masks {
                mask_identical += idxs.len();
            }
        }
        for &j in idxs {
            if examples[j].ambiguous {
                amb_total += 1;
                if conflict {
                    amb_conflict += 1;
                }
            } else {
                unamb_total += 1;
                if conflict {
                    unamb_conflict += 1;
                }
            }
        }
    }
    println!(
        "examples {} | ambiguous {} of which in conflicting triples {} ({:.1}%)",
        examples.len(),
        amb_total,
        amb_conflict,
        100.0 * amb_conflict as f64 / amb_total as f64
    );
    println!(
        "unambiguous {} of which conflicting {} ({:.1}%) | conflicting-with-identical-masks {}",
        unamb_total,
        unamb_conflict,
        100.0 * unamb_conflict as f64 / unamb_total.max(1) as f64,
        mask_identical
    );
}
