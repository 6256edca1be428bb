use super::RouteSpec;
use crate::error::{Error, Result};

/// Splits `route` into the fewest equal-length pieces no longer than
/// `max_len`. Consecutive pieces share their boundary waypoint; controls and
/// junctions move to the piece containing them with re-based arc lengths.
pub fn split_route(route: &RouteSpec, max_len: f64) -> Result<Vec<RouteSpec>> {
    if !(max_len > 0.0) {
        return Err(Error::Usage(format!("max_len must be positive, got {max_len}")));
    }
    let line = route.polyline()?;
    let len = line.length();
    // a route exactly max_len long stays whole
    let n = ((len / max_len) - 1e-12).ceil().max(1.0) as usize;
    if n == 1 {
        return Ok(vec![route.clone()]);
    }
    let cuts: Vec<f64> = (0..=n).map(|i| if i == n { len } else { len * i as f64 / n as f64 }).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (s0, s1) = (cuts[k], cuts[k + 1]);
        let piece = line.slice(s0, s1);
        let last = k + 1 == n;
        let inside = |at: f64| at >= s0 && (at < s1 || (last && at <= s1));
        out.push(RouteSpec {
            id: format!("{}-{k}", route.id),
            waypoints: piece.points().to_vec(),
            lane_width: route.lane_width,
            layout: route.layout,
            controls: route
                .controls
                .iter()
                .filter(|c| inside(c.at))
                .map(|c| {
                    let mut c = *c;
                    c.at -= s0;
                    c
                })
                .collect(),
            junctions: route
                .junctions
                .iter()
                .filter(|j| inside(j.at))
                .map(|j| {
                    let mut j = *j;
                    j.at -= s0;
                    j
                })
                .collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::scenario::LaneLayout;
    use proptest::prelude::*;

    fn straight(len: f64) -> RouteSpec {
        RouteSpec {
            id: "r".into(),
            waypoints: vec![Vec2::new(0.0, 0.0), Vec2::new(len, 0.0)],
            lane_width: 3.5,
            layout: LaneLayout::TwoWay,
            controls: vec![],
            junctions: vec![],
        }
    }

    #[test]
    fn short_and_boundary_routes_stay_whole() {
        assert_eq!(split_route(&straight(250.0), 300.0).unwrap(), vec![straight(250.0)]);
        assert_eq!(split_route(&straight(300.0), 300.0).unwrap().len(), 1);
    }

    #[test]
    fn nine_hundred_meters_make_three_pieces() {
        let parts = split_route(&straight(900.0), 300.0).unwrap();
        assert_eq!(parts.len(), 3);
        let total: f64 = parts.iter().map(|p| p.length().unwrap()).sum();
        assert!((total - 900.0).abs() < 1e-6);
        for w in parts.windows(2) {
            assert_eq!(w[0].waypoints.last(), w[1].waypoints.first());
        }
    }

    proptest! {
        #[test]
        fn pieces_cover_the_route(
            pts in prop::collection::vec((-200.0f64..200.0, -200.0f64..200.0), 2..12),
            max_len in 20.0f64..400.0,
        ) {
            let mut r = straight(1.0);
            r.waypoints = pts.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
            r.waypoints.dedup_by(|a, b| a.dist(*b) < 1e-3);
            prop_assume!(r.waypoints.len() >= 2);
            let len = r.length().unwrap();
            let parts = split_route(&r, max_len).unwrap();
            let total: f64 = parts.iter().map(|p| p.length().unwrap()).sum();
            prop_assert!((total - len).abs() < 1e-6);
            for p in &parts {
                prop_assert!(p.length().unwrap() <= max_len + 1e-9);
            }
        }
    }
}
