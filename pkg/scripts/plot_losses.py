import os
import json
import argparse
import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt


def parse_args():
    parser = argparse.ArgumentParser(description='Plot the loss curves of a training run')
    parser.add_argument('run_dir', type=str,
                        help='run directory holding train_log.jsonl or pam_log.jsonl')
    parser.add_argument('--log', type=str, default='train_log.jsonl',
                        help='log file name inside RUN_DIR')
    parser.add_argument('--terms', type=str, nargs='+', default=['rec_x', 'rec_y', 'rec_yx', 'fp'],
                        help='loss terms to plot')
    parser.add_argument('--window', type=int, default=50,
                        metavar='N', help='moving-average window in steps')
    parser.add_argument('--out', type=str, default=None,
                        help='output PNG (default: RUN_DIR/losses.png)')
    return parser.parse_args()


def moving_average(values, window):
    if len(values) < window:
        return np.asarray(values)
    return np.convolve(values, np.ones(window) / window, mode='valid')


if __name__ == '__main__':
    args = parse_args()
    with open(os.path.join(args.run_dir, args.log)) as f:
        entries = [json.loads(line) for line in f if line.strip()]
    steps = np.array([e['step'] for e in entries])

    plt.figure(figsize=(12, 5))
    handles = []
    for term in args.terms:
        if term not in entries[0]:
            print('No `%s` column in %s, skipping.' % (term, args.log))
            continue
        smoothed = moving_average([e[term] for e in entries], args.window)
        h, = plt.plot(steps[len(steps) - len(smoothed):], smoothed, label=term)
        handles.append(h)
    plt.legend(handles=handles)
    plt.xlabel('step')
    plt.ylabel('loss (moving average over %d steps)' % args.window)
    plt.title(os.path.basename(os.path.normpath(args.run_dir)))
    out_path = args.out or os.path.join(args.run_dir, 'losses.png')
    plt.savefig(out_path)
    print('Wrote `%s`.' % out_path)
    plt.clf()
