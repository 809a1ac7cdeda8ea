//! Exact optimal transport between weighted clouds by the transportation
//! simplex (network simplex specialised to the bipartite transport
//! polytope). Used for the Wasserstein distance in dimension >= 2; the 1-d
//! quantile routine is cheaper and agrees with this one, which is checked by
//! property tests.

use super::CloudView;
use crate::error::{CoreError, Result};

/// Basic cell of the transportation tableau.
#[derive(Clone, Copy, Debug)]
struct Basic {
    row: usize,
    col: usize,
    flow: f64,
}

/// Solve `min sum c_ij f_ij` s.t. row sums `a`, column sums `b`, `f >= 0`,
/// where `c_ij` is the squared Euclidean distance. Returns the optimal cost.
pub fn transport_cost(a: CloudView<'_>, b: CloudView<'_>) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        let p = a.point(i);
        for j in 0..m {
            let q = b.point(j);
            cost[i * m + j] = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let flows = solve(&cost, a.weights, b.weights, n, m)?;
    let total: f64 = flows.iter().map(|c| c.flow * cost[c.row * m + c.col]).sum();
    Ok(total.max(0.0))
}

pub fn exact_w2(a: CloudView<'_>, b: CloudView<'_>) -> Result<f64> {
    Ok(transport_cost(a, b)?.sqrt())
}

fn solve(cost: &[f64], a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<Basic>> {
    // North-west corner start: exactly n+m-1 basic cells, zero-flow cells
    // kept so the basis always spans.
    let mut basics: Vec<Basic> = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0], b[0]);
    loop {
        basics.push(Basic { row: i, col: j, flow: ra.min(rb).max(0.0) });
        if i == n - 1 && j == m - 1 {
            break;
        }
        if (ra < rb || j == m - 1) && i < n - 1 {
            rb -= ra;
            i += 1;
            ra = a[i];
        } else {
            ra -= rb;
            j += 1;
            rb = b[j];
        }
    }
    debug_assert_eq!(basics.len(), n + m - 1);

    let scale = cost.iter().cloned().fold(1.0f64, f64::max);
    let tol = 1e-12 * scale;
    // Most-negative entering rule, switching to first-negative (Bland)
    // past a soft cap to rule out cycling on degenerate bases.
    let soft_cap = 200 + 20 * (n + m);
    let hard_cap = 10 * soft_cap + 100_000;

    let mut row_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];
    let mut seen_row = vec![false; n];
    let mut seen_col = vec![false; m];

    for pivot in 0..hard_cap {
        row_adj.iter_mut().for_each(Vec::clear);
        col_adj.iter_mut().for_each(Vec::clear);
        for (k, c) in basics.iter().enumerate() {
            row_adj[c.row].push(k);
            col_adj[c.col].push(k);
        }

        // Potentials u_i + v_j = c_ij over the basis tree, rooted at row 0.
        seen_row.fill(false);
        seen_col.fill(false);
        u[0] = 0.0;
        seen_row[0] = true;
        let mut stack: Vec<(bool, usize)> = vec![(true, 0)];
        while let Some((is_row, node)) = stack.pop() {
            let adj = if is_row { &row_adj[node] } else { &col_adj[node] };
            for &k in adj {
                let c = basics[k];
                if is_row && !seen_col[c.col] {
                    v[c.col] = cost[c.row * m + c.col] - u[c.row];
                    seen_col[c.col] = true;
                    stack.push((false, c.col));
                } else if !is_row && !seen_row[c.row] {
                    u[c.row] = cost[c.row * m + c.col] - v[c.col];
                    seen_row[c.row] = true;
                    stack.push((true, c.row));
                }
            }
        }
        if seen_row.iter().any(|s| !s) || seen_col.iter().any(|s| !s) {
            return Err(CoreError::InvalidConfig(
                "transport basis lost spanning-tree structure".into(),
            ));
        }

        // Entering arc.
        let bland = pivot >= soft_cap;
        let mut enter: Option<(usize, usize, f64)> = None;
        'scan: for r in 0..n {
            for c in 0..m {
                let red = cost[r * m + c] - u[r] - v[c];
                if red < -tol {
                    match enter {
                        Some((_, _, best)) if !bland && red >= best => {}
                        _ => {
                            enter = Some((r, c, red));
                            if bland {
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
        let Some((er, ec, _)) = enter else {
            return Ok(basics); // optimal
        };

        // Unique tree path from row `er` to col `ec`; flows alternate signs
        // along the cycle closed by the entering arc.
        let path = tree_path(&basics, &row_adj, &col_adj, n, m, er, ec)?;
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                // minus arcs: first path arc leaves row `er`
                if basics[k].flow < theta {
                    theta = basics[k].flow;
                    leave = k;
                }
            }
        }
        debug_assert!(leave != usize::MAX);
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basics[k].flow = (basics[k].flow - theta).max(0.0);
            } else {
                basics[k].flow += theta;
            }
        }
        basics[leave] = Basic { row: er, col: ec, flow: theta };
    }
    Err(CoreError::InvalidConfig(
        "transportation simplex exceeded pivot cap".into(),
    ))
}

/// Basic-cell indices on the alternating tree path row `er` -> col `ec`.
/// The path starts with an arc incident to row `er`, so arcs at even
/// positions lose flow when the entering arc gains.
fn tree_path(
    basics: &[Basic],
    row_adj: &[Vec<usize>],
    col_adj: &[Vec<usize>],
    n: usize,
    m: usize,
    er: usize,
    ec: usize,
) -> Result<Vec<usize>> {
    // BFS over tree nodes; rows are 0..n, cols are n..n+m.
    let total = n + m;
    let mut parent_arc = vec![usize::MAX; total];
    let mut parent_node = vec![usize::MAX; total];
    let mut visited = vec![false; total];
    let start = er;
    let goal = n + ec;
    visited[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        let (is_row, idx) = if node < n { (true, node) } else { (false, node - n) };
        let adj = if is_row { &row_adj[idx] } else { &col_adj[idx] };
        for &k in adj {
            let next = if is_row { n + basics[k].col } else { basics[k].row };
            if !visited[next] {
                visited[next] = true;
                parent_arc[next] = k;
                parent_node[next] = node;
                queue.push_back(next);
            }
        }
    }
    if !visited[goal] {
        return Err(CoreError::InvalidConfig(
            "transport basis disconnected while pivoting".into(),
        ));
    }
    let mut path = Vec::new();
    let mut node = goal;
    while node != start {
        path.push(parent_arc[node]);
        node = parent_node[node];
    }
    path.reverse();
    Ok(path)
}
