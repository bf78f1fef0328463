//! Loss and metric conventions on hand-sized examples.

use mcinet::objective::{bce, fb_iou, iou, miou};
use mcinet_autodiff::Tensor;

fn main() -> mcinet::Result<()> {
    let z = Tensor::new(vec![1], vec![0.0])?;
    let one = Tensor::new(vec![1], vec![1.0])?;
    println!("bce(logit 0, target 1) = {:.12} (ln 2 = {:.12})", bce(&z, &one)?, std::f64::consts::LN_2);

    // 2×2 masks: top row predicted, left column true
    let pred = vec![true, true, false, false];
    let gt = vec![true, false, true, false];
    println!("IoU = {}", iou(&pred, &gt));
    println!("IoU of two empty masks = {}", iou(&[false; 4], &[false; 4]));

    let preds = vec![pred.clone(), vec![true; 4]];
    let gts = vec![gt.clone(), vec![true; 4]];
    println!("mIoU over classes 0 and 1 = {:.4}", miou(&preds, &gts, &[0, 1], &[0, 1])?);
    println!("FB-IoU (pooled counts) = {:.4}", fb_iou(&preds, &gts)?);
    Ok(())
}
