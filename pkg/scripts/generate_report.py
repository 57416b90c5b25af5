#!/usr/bin/env python3
"""
Report generation script for retrieval evaluations and training runs.
"""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.report import load_tsv, plot_report, summarize_evaluation, summarize_metrics
import argparse
import json


def print_report(report):
    """Pretty print a report to console."""
    print(f"\n{'='*60}")
    print("POSH RETRIEVAL REPORT")
    print(f"{'='*60}\n")

    evaluation = report.get('evaluation')
    if evaluation:
        print("SUMMARY")
        print("-" * 30)
        print(f"Queries Evaluated: {evaluation['queries']}")
        print(f"Queries Skipped: {evaluation['skipped']}")
        for metric, value in evaluation['mean'].items():
            print(f"Mean {metric.upper()}: {value:.4f}")

        print(f"\n\nWORST QUERIES (Bottom 5 by AUROC)")
        print("-" * 30)
        print(f"{'Query':<20} {'AUROC':<10} {'AUPRC':<10} {'# Similar':<10}")
        for q in evaluation['worst']:
            print(f"{q['query']:<20} {q['auroc']:<10.4f} {q['auprc']:<10.4f} {q['n_similar']:<10}")

        print(f"\n\nBEST QUERIES (Top 5 by AUROC)")
        print("-" * 30)
        print(f"{'Query':<20} {'AUROC':<10} {'AUPRC':<10} {'# Similar':<10}")
        for q in evaluation['best']:
            print(f"{q['query']:<20} {q['auroc']:<10.4f} {q['auprc']:<10.4f} {q['n_similar']:<10}")

    training = report.get('training')
    if training:
        print(f"\n\nTRAINING")
        print("-" * 30)
        print(f"Optimizer Steps: {training['steps']}")
        if training['steps']:
            print(f"First Loss: {training['first_loss']:.4f}")
            print(f"Last Loss: {training['last_loss']:.4f}")
            print(f"Best Loss: {training['best_loss']:.4f} (step {training['best_step']})")

    print(f"\n{'='*60}\n")


def main():
    parser = argparse.ArgumentParser(description='Summarize posh evaluation and training logs')
    parser.add_argument('--eval', type=str, help='Evaluation report TSV (posh eval -o)')
    parser.add_argument('--metrics', type=str, help='Training metrics TSV (posh train --metrics)')
    parser.add_argument('--benchmark', type=str, help='Timing TSV (posh benchmark)')
    parser.add_argument('--plot', type=str, help='Write loss/timing plots to this image')
    parser.add_argument('--output', type=str, choices=['console', 'json', 'both'],
                        default='console',
                        help='Output format (default: console)')
    parser.add_argument('--output-file', type=str, default='report.json',
                        help='Output file for JSON format')

    args = parser.parse_args()
    if not (args.eval or args.metrics or args.benchmark):
        parser.error('give at least one of --eval, --metrics, --benchmark')

    report = {}
    metrics = load_tsv(args.metrics) if args.metrics else None
    benchmark = load_tsv(args.benchmark) if args.benchmark else None
    if args.eval:
        report['evaluation'] = summarize_evaluation(load_tsv(args.eval))
    if metrics is not None:
        report['training'] = summarize_metrics(metrics)

    if args.output in ['console', 'both']:
        print_report(report)

    if args.output in ['json', 'both']:
        with open(args.output_file, 'w') as f:
            json.dump(report, f, indent=2, default=str)
        print(f"Report saved to {args.output_file}")

    if args.plot:
        if plot_report(args.plot, metrics, benchmark):
            print(f"Plot saved to {args.plot}")


if __name__ == "__main__":
    main()
