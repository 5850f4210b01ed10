/** Unit formatting helpers: the only "numerics" the console performs. */

/** Cell concentrations rendered like 1.43e9/L. */
export function formatCells(value: number): string {
  if (!Number.isFinite(value)) return "–";
  if (value === 0) return "0 /L";
  const exp = Math.floor(Math.log10(Math.abs(value)));
  const mantissa = value / 10 ** exp;
  return `${mantissa.toFixed(2)}e${exp} /L`;
}

export function formatDose(mgPerDay: number): string {
  if (!Number.isFinite(mgPerDay)) return "–";
  return `${mgPerDay.toFixed(1)} mg/d`;
}

export function formatCost(value: number): string {
  if (!Number.isFinite(value)) return "–";
  return value.toExponential(3);
}

export function formatPercentOfNominal(dose: number, nominal: number): string {
  if (nominal <= 0) return "–";
  return `${Math.round((dose / nominal) * 100)}%`;
}
