//! Derived values checked against independent implementations.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use edgenav::model::{entropy, exit_head_forward, ExitHead};
use edgenav::navsim::{generate_map, region_distances, shortest_path_len, step, Action, AgentState, GridMap, Heading, Pos};
use edgenav::numerics::{Matrix, ProbVector, Rng};
use edgenav::quantizer::{nf4_codebook, quant_mse, quantize, quantize_uniform, Scheme};
use edgenav::training::{multi_exit_loss, oracle_action, Adam};
use statrs::distribution::{ContinuousCDF, Normal};

/// The table rebuilt from statrs quantiles: 8 positive points and 7
/// negative ones from 0.9677 towards 0.5, plus zero, scaled to [-1, 1].
fn reference_codebook() -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let side = |count: usize| -> Vec<f64> {
        let step = (0.5 - 0.9677) / count as f64;
        (0..count).map(|i| n.inverse_cdf(0.9677 + step * i as f64)).collect()
    };
    let mut v: Vec<f64> = side(8);
    v.extend(side(7).into_iter().map(|x| -x));
    v.push(0.0);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = v[15];
    v.into_iter().map(|x| x / max).collect()
}

#[test]
fn nf4_codebook_matches_statrs_quantiles() {
    let expect = reference_codebook();
    let got = nf4_codebook();
    for (g, e) in got.values().iter().zip(&expect) {
        assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
    }
    assert_eq!(got.values().iter().filter(|v| **v < 0.0).count(), 7);
    assert_eq!(got.values().iter().filter(|v| **v > 0.0).count(), 8);
}

#[test]
fn nf4_error_on_small_normal_weights() {
    let mut rng = Rng::new(11);
    let w = Matrix::<f32>::random_normal(64, 64, 0.02, &mut rng);
    let q = quantize(&w, 64, Scheme::Nf4).unwrap();
    let err = edgenav::quantizer::quant_error(&w, &q).unwrap();
    eprintln!("nf4 rel_frobenius on N(0, 0.02): {:.4}", err.rel_frobenius);
    assert!(err.rel_frobenius < 0.10, "{}", err.rel_frobenius);
    let u = quantize_uniform(&w, 4, 64).unwrap();
    assert!(quant_mse(&w, &u).unwrap() > quant_mse(&w, &q).unwrap());
}

fn dijkstra(map: &GridMap, a: Pos) -> Vec<Option<u64>> {
    let idx = |p: Pos| p.y * map.width() + p.x;
    let mut dist = vec![None; map.width() * map.height()];
    let mut heap = BinaryHeap::new();
    dist[idx(a)] = Some(0u64);
    heap.push(Reverse((0u64, a.x, a.y)));
    while let Some(Reverse((d, x, y))) = heap.pop() {
        if dist[idx(Pos::new(x, y))].is_some_and(|best| best < d) {
            continue;
        }
        for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx < 0 || ny < 0 {
                continue;
            }
            let q = Pos::new(nx as usize, ny as usize);
            if !map.in_bounds(q) || !map.is_free(q) {
                continue;
            }
            let nd = d + 1;
            if dist[idx(q)].is_none_or(|best| nd < best) {
                dist[idx(q)] = Some(nd);
                heap.push(Reverse((nd, q.x, q.y)));
            }
        }
    }
    dist
}

#[test]
fn shortest_path_matches_dijkstra() {
    let mut rng = Rng::new(5);
    for seed in 0..6 {
        let map = generate_map(seed, 13, 11, 0.3).unwrap();
        let free = map.free_cells();
        for _ in 0..20 {
            let a = free[rng.below(free.len())];
            let b = free[rng.below(free.len())];
            let d = dijkstra(&map, a)[b.y * map.width() + b.x].unwrap();
            let got = shortest_path_len(&map, a, b).unwrap();
            assert!((got - d as f64 * map.cell_size()).abs() < 1e-12);
        }
    }
}

#[test]
fn exit_head_matches_composition() {
    let mut rng = Rng::new(2);
    let head = ExitHead::<f64>::new(16, 8, 4, &mut rng);
    let mut head = head;
    for v in head.b1.iter_mut().chain(head.b2.iter_mut()) {
        *v = rng.normal() * 0.3;
    }
    let z: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let mut h = vec![0.0; 8];
    for (i, hi) in h.iter_mut().enumerate() {
        let s: f64 = (0..16).map(|j| head.w1.get(i, j) * z[j]).sum::<f64>() + head.b1[i];
        *hi = s.max(0.0);
    }
    let logits: Vec<f64> = (0..4)
        .map(|a| (0..8).map(|i| head.w2.get(a, i) * h[i]).sum::<f64>() + head.b2[a])
        .collect();
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    let p = exit_head_forward(&head, &z).unwrap();
    for (got, l) in p.as_slice().iter().zip(&logits) {
        assert!((got - l.exp() / denom).abs() < 1e-6);
    }
    assert!(exit_head_forward(&head, &z[..15]).is_err());
}

#[test]
fn entropy_direct_evaluation() {
    let p = ProbVector::new(vec![0.7f64, 0.1, 0.1, 0.1]).unwrap();
    let direct = -(0.7f64 * 0.7f64.ln() + 3.0 * 0.1 * 0.1f64.ln());
    assert!((entropy(&p) - direct).abs() < 1e-12);
    assert!((direct - 0.9404).abs() < 1e-4);
}

#[test]
fn loss_matches_negative_log_oracle() {
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let draw = |rng: &mut Rng| {
            let raw: Vec<f64> = (0..4).map(|_| rng.next_f64() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
        };
        let exits = vec![draw(&mut rng), draw(&mut rng)];
        let fin = draw(&mut rng);
        let gt = Action::from_index(rng.below(4)).unwrap();
        let alphas = [1.0, 0.5];
        let l = multi_exit_loss(&exits, &fin, gt, &alphas).unwrap();
        let g = gt.index();
        let expect = -fin.as_slice()[g].ln() - exits[0].as_slice()[g].ln() - 0.5 * exits[1].as_slice()[g].ln();
        assert!((l.total - expect).abs() < 1e-9);
        assert!((l.total - (l.final_loss + l.exits[0] + 0.5 * l.exits[1])).abs() < 1e-9);
    }
}

#[test]
fn adam_constant_gradient_moves_by_lr() {
    // With a constant gradient both bias-corrected moments are exact, so every
    // update is lr·g/(|g| + eps).
    let mut adam = Adam::new(1e-3);
    let mut p = vec![0.0f64, 0.0];
    let g = [0.3f64, -2.0];
    let mut prev = p.clone();
    for _ in 0..500 {
        adam.step(&mut [("p".to_string(), &mut p[..])], &[("p".to_string(), &g[..])]).unwrap();
        for j in 0..2 {
            let expect = -1e-3 * g[j] / (g[j].abs() + 1e-8);
            assert!((p[j] - prev[j] - expect).abs() < 1e-12);
        }
        prev = p.clone();
    }
}

/// Fewest actions to reach the goal region from a pose, by BFS over
/// (cell, heading) with unit-cost moves and turns.
fn pose_cost(map: &GridMap, start: AgentState, radius: usize) -> usize {
    let mut seen = std::collections::HashSet::new();
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((s, d)) = queue.pop_front() {
        if s.position.chebyshev(s.goal) <= radius {
            return d;
        }
        if !seen.insert((s.position, s.heading)) {
            continue;
        }
        for a in [Action::Forward, Action::Left, Action::Right] {
            queue.push_back((step(map, &s, a).unwrap(), d + 1));
        }
    }
    usize::MAX
}

#[test]
fn goal_behind_turns_left_and_both_turns_tie() {
    let map = GridMap::empty(11, 11).unwrap();
    let state = AgentState::new(Pos::new(5, 3), Heading::North, Pos::new(5, 8));
    let field = region_distances(&map, state.goal, 1);
    assert_eq!(oracle_action(&map, &state, &field, 1), Action::Left);
    let left = pose_cost(&map, step(&map, &state, Action::Left).unwrap(), 1);
    let right = pose_cost(&map, step(&map, &state, Action::Right).unwrap(), 1);
    assert_eq!(left, right);
    assert!(left < pose_cost(&map, step(&map, &state, Action::Forward).unwrap(), 1));
}

#[test]
fn corridor_facing_goal_moves_forward() {
    let map = GridMap::parse("#######\n#.....#\n#######\n").unwrap();
    let state = AgentState::new(Pos::new(1, 1), Heading::East, Pos::new(5, 1));
    let field = region_distances(&map, state.goal, 1);
    assert_eq!(oracle_action(&map, &state, &field, 1), Action::Forward);
    let near = AgentState::new(Pos::new(4, 1), Heading::East, Pos::new(5, 1));
    assert_eq!(oracle_action(&map, &near, &field, 1), Action::Stop);
}
