// Temporary diagnostic scratchpad (deleted before release).
use huvfa::env::{FourRoomsWorld, GridPos, Room, StateSpace};
use huvfa::horde::Horde;
use huvfa::model::{build_supervised_ridged, greedy_rollout, value_policy_field};
use huvfa::net::TrainConfig;
use huvfa::stage_rng;
use huvfa::tabular::LearnerConfig;
use rand::Rng;

// Farthest-point goal spread: per room, random first cell then greedy
// max-min euclidean dispersion.
fn spread_goals(world: &FourRoomsWorld, per_room: &[(Room, usize)], rng: &mut impl Rng) -> Vec<GridPos> {
    let mut out = Vec::new();
    for (room, count) in per_room {
        let pool: Vec<GridPos> = world
            .free_cells()
            .into_iter()
            .filter(|p| world.room_of(*p) == Some(*room))
            .collect();
        let mut chosen: Vec<GridPos> = vec![pool[rng.gen_range(0..pool.len())]];
        while chosen.len() < *count {
            let far = pool
                .iter()
                .filter(|p| !chosen.contains(p))
                .max_by(|a, b| {
                    let da = chosen
                        .iter()
                        .map(|c| {
                            let dx = a.x as f64 - c.x as f64;
                            let dy = a.y as f64 - c.y as f64;
                            dx * dx + dy * dy
                        })
                        .fold(f64::INFINITY, f64::min);
                    let db = chosen
                        .iter()
                        .map(|c| {
                            let dx = b.x as f64 - c.x as f64;
                            let dy = b.y as f64 - c.y as f64;
                            dx * dx + dy * dy
                        })
                        .fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            chosen.push(*far);
        }
        out.extend(chosen);
    }
    out
}

fn main() {
    let seed = 0u64;
    let world = FourRoomsWorld::load_layout();
    let space = StateSpace::new(&world);
    let cfg = LearnerConfig {
        gamma: 0.9,
        episodes: 1_000_000,
        ..LearnerConfig::default()
    };
    let mut goal_rng = stage_rng(seed, "goals");
    let train_goals = spread_goals(
        &world,
        &[(Room::TopLeft, 9), (Room::TopRight, 8), (Room::BottomLeft, 8)],
        &mut goal_rng,
    );
    println!("goals: {train_goals:?}");
    let horde = Horde::train(&world, &space, &train_goals, &cfg, seed);
    let mut unseen_rng = stage_rng(seed, "unseen");
    let unseen = world.sample_test_goals(3, &mut unseen_rng);

    let tc = TrainConfig {
        epochs: 2000,
        ..TrainConfig::default()
    };
    let built = build_supervised_ridged(&space, &horde, 50, &tc, seed, 1e-2).unwrap();
    println!(
        "omega_err {:.3} u_err {:.3}",
        built.report.omega_error, built.report.u_error
    );

    let mut eval_rng = stage_rng(seed, "eval");
    for (tag, goals) in [("trained", &train_goals[..5]), ("unseen", &unseen[..])] {
        for g in goals {
            let dist = world.bfs_distances(*g);
            let field = value_policy_field(&built.model, &world, *g);
            let mut sorted = field.clone();
            sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut descend = 0;
            let mut total = 0;
            for (p, _, a) in &field {
                if *p == *g {
                    continue;
                }
                total += 1;
                let (next, _, _) = world.step(*p, *a);
                if next != *p && dist[&next] < dist[p] {
                    descend += 1;
                }
            }
            let r = greedy_rollout(&built.model, &world, *g, 10, 0.5, &mut eval_rng);
            println!(
                "{tag} {g}: success {:.0}% mean {:.0} descend {descend}/{total} peak {}",
                100.0 * r.success_rate,
                r.mean_steps,
                sorted[0].0
            );
        }
    }
}
