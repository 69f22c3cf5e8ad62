use rand::Rng;

use super::{Position, RunParameters};

/// Cardinal steps in draw order: up, down, left, right.
const DIRECTIONS: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Moves one cell in a uniformly drawn cardinal direction, re-drawing while the
/// step would leave the field. A 1x1 field has no legal move and returns `p`.
pub fn step_position<R: Rng + ?Sized>(p: Position, params: &RunParameters, rng: &mut R) -> Position {
    let target = |(dx, dy): (i64, i64)| -> Option<Position> {
        let x = i64::from(p.x) + dx;
        let y = i64::from(p.y) + dy;
        let inside = (0..i64::from(params.field_width)).contains(&x)
            && (0..i64::from(params.field_height)).contains(&y);
        inside.then(|| Position::new(x as u32, y as u32))
    };
    if DIRECTIONS.iter().all(|&d| target(d).is_none()) {
        return p;
    }
    loop {
        if let Some(next) = target(DIRECTIONS[rng.random_range(0..DIRECTIONS.len())]) {
            return next;
        }
    }
}

/// Euclidean distance test, inclusive of the radius.
pub fn in_infection_range(a: Position, b: Position, radius: f64) -> bool {
    let dx = f64::from(a.x) - f64::from(b.x);
    let dy = f64::from(a.y) - f64::from(b.y);
    dx * dx + dy * dy <= radius * radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(w: u32, h: u32) -> RunParameters {
        RunParameters { field_width: w, field_height: h, ..RunParameters::default() }
    }

    #[test]
    fn single_cell_field_never_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(step_position(Position::new(0, 0), &field(1, 1), &mut rng), Position::new(0, 0));
    }

    #[test]
    fn interior_step_is_a_cardinal_neighbour() {
        let neighbours = [(4, 5), (6, 5), (5, 4), (5, 6)].map(|(x, y)| Position::new(x, y));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let next = step_position(Position::new(5, 5), &field(100, 100), &mut rng);
            assert!(neighbours.contains(&next), "{next}");
        }
    }

    #[test]
    fn seeded_corner_step_is_frozen() {
        // Oracle: replay the draws by hand; from (0,0) only indices 1 (down) and 3 (right) are legal.
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(0);
        let expected = loop {
            match oracle_rng.random_range(0..4usize) {
                1 => break Position::new(0, 1),
                3 => break Position::new(1, 0),
                _ => continue,
            }
        };
        assert_eq!(expected, Position::new(0, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(step_position(Position::new(0, 0), &field(100, 100), &mut rng), expected);
    }

    #[test]
    fn narrow_field_moves_along_its_only_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let next = step_position(Position::new(0, 0), &field(1, 2), &mut rng);
        assert_eq!(next, Position::new(0, 1));
    }

    #[test]
    fn range_examples() {
        let o = Position::new(0, 0);
        assert!(in_infection_range(o, o, 0.0));
        assert!(in_infection_range(o, Position::new(1, 1), 2.0));
        assert!(!in_infection_range(o, Position::new(2, 2), 2.0));
        assert!(in_infection_range(o, Position::new(0, 2), 2.0));
    }

    proptest! {
        #[test]
        fn step_stays_inside_and_is_never_diagonal(
            w in 1u32..12, h in 1u32..12, fx in 0.0f64..1.0, fy in 0.0f64..1.0, seed in any::<u64>(),
        ) {
            let params = field(w, h);
            let p = Position::new((fx * w as f64) as u32, (fy * h as f64) as u32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = step_position(p, &params, &mut rng);
            prop_assert!(params.contains(q));
            let dx = (i64::from(p.x) - i64::from(q.x)).abs();
            let dy = (i64::from(p.y) - i64::from(q.y)).abs();
            prop_assert!(dx.max(dy) <= 1);
            prop_assert!(dx + dy <= 1);
            if w * h >= 2 {
                prop_assert_eq!(dx + dy, 1);
            }
        }

        #[test]
        fn range_is_symmetric(ax in 0u32..200, ay in 0u32..200, bx in 0u32..200, by in 0u32..200, r in 0.0f64..50.0) {
            let (a, b) = (Position::new(ax, ay), Position::new(bx, by));
            prop_assert_eq!(in_infection_range(a, b, r), in_infection_range(b, a, r));
        }
    }
}
