use super::{EdgeMask, NetworkShape, SymNetError, WeightStore};
use crate::expr::Expr;

/// Reads the expression encoded by a minimalist mask.
///
/// Every retained edge becomes `Const(weight) * source`; the constant-`1`
/// input collapses to `Const(weight)`; identity chains are transparent.
/// Protected evaluation of the result reproduces the masked forward pass.
pub fn extract_expression(
    shape: &NetworkShape,
    w: &WeightStore,
    mask: &EdgeMask,
) -> Result<Expr, SymNetError> {
    mask.check_minimalist(shape)?;
    Ok(edge_expr(shape, w, mask, shape.output_group()))
}

fn edge_expr(shape: &NetworkShape, w: &WeightStore, mask: &EdgeMask, g: usize) -> Expr {
    let edge = mask.single_edge(shape, g).expect("minimalist mask checked");
    let weight = w.group(shape, g)[edge];
    if edge == shape.const_node() {
        return Expr::Const(weight);
    }
    Expr::mul(Expr::Const(weight), node_expr(shape, w, mask, edge))
}

fn node_expr(shape: &NetworkShape, w: &WeightStore, mask: &EdgeMask, k: usize) -> Expr {
    match shape.node_op(k) {
        None => Expr::Var(k),
        Some(op) => {
            let mut args: Vec<Expr> = shape.node_groups(k).map(|g| edge_expr(shape, w, mask, g)).collect();
            if args.len() == 1 {
                Expr::unary(op, args.pop().unwrap())
            } else {
                let rhs = args.pop().unwrap();
                Expr::binary(op, args.pop().unwrap(), rhs)
            }
        }
    }
}
